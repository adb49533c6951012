//! Bundled exemplar flows, plus the drill, debate and collaborate templates.

use crate::flow::{parse_flow, FlowDefinition};

pub const QUIZ_DRILL: &str = include_str!("../flows/quiz-drill.json");
pub const DEBATE: &str = include_str!("../flows/debate.json");
pub const COUNSELING_SIMULATION: &str = include_str!("../flows/counseling-simulation.json");
pub const COLLABORATIVE_RESEARCH: &str = include_str!("../flows/collaborative-research.json");
pub const TEAM_DEBATE_3V3: &str = include_str!("../flows/team-debate-3v3.json");

pub const DRILL_TEMPLATE: &str = include_str!("../flows/templates/drill.json");
pub const DEBATE_TEMPLATE: &str = include_str!("../flows/templates/debate.json");
pub const COLLABORATE_TEMPLATE: &str = include_str!("../flows/templates/collaborate.json");

/// `(name, document)` for every bundled exemplar, in export order.
pub const EXEMPLARS: [(&str, &str); 5] = [
    ("quiz-drill", QUIZ_DRILL),
    ("debate", DEBATE),
    ("counseling-simulation", COUNSELING_SIMULATION),
    ("collaborative-research", COLLABORATIVE_RESEARCH),
    ("team-debate-3v3", TEAM_DEBATE_3V3),
];

pub const TEMPLATES: [(&str, &str); 3] = [
    ("drill", DRILL_TEMPLATE),
    ("debate", DEBATE_TEMPLATE),
    ("collaborate", COLLABORATE_TEMPLATE),
];

/// Parses a bundled exemplar by name.
pub fn exemplar(name: &str) -> Option<FlowDefinition> {
    EXEMPLARS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, doc)| parse_flow(doc).expect("bundled exemplar parses"))
}

/// Parses a bundled template by name.
pub fn template(name: &str) -> Option<FlowDefinition> {
    TEMPLATES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, doc)| parse_flow(doc).expect("bundled template parses"))
}

pub fn quiz_drill() -> FlowDefinition {
    exemplar("quiz-drill").unwrap()
}

pub fn debate() -> FlowDefinition {
    exemplar("debate").unwrap()
}

pub fn counseling_simulation() -> FlowDefinition {
    exemplar("counseling-simulation").unwrap()
}

pub fn collaborative_research() -> FlowDefinition {
    exemplar("collaborative-research").unwrap()
}

pub fn team_debate_3v3() -> FlowDefinition {
    exemplar("team-debate-3v3").unwrap()
}
