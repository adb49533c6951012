use std::collections::HashMap;
use std::io::Write;

use learnflow_core::log::LogRecord;
use learnflow_core::FlowDefinition;

/// Renders records as text, with a header whenever a loop iteration begins.
pub struct Printer<W: Write> {
    out: W,
    /// step id -> (first, last) top-level ids of its loop body
    body_of: HashMap<String, (String, String)>,
    current: Option<(String, u32)>,
}

impl<W: Write> Printer<W> {
    pub fn new(flow: &FlowDefinition, out: W) -> Self {
        let mut body_of = HashMap::new();
        for (first, last, _) in flow.loop_ranges() {
            let range = (flow.steps[first].id.clone(), flow.steps[last].id.clone());
            for step in &flow.steps[first..=last] {
                body_of.insert(step.id.clone(), range.clone());
                for leaf in step.leaves() {
                    body_of.insert(leaf.id.clone(), range.clone());
                }
            }
        }
        Self {
            out,
            body_of,
            current: None,
        }
    }

    pub fn record(&mut self, r: &LogRecord) -> std::io::Result<()> {
        match self.body_of.get(&r.step_id) {
            Some((first, last)) => {
                let key = (first.clone(), r.iteration);
                if self.current.as_ref() != Some(&key) {
                    writeln!(self.out, "== iteration {} of steps {first}-{last} ==", r.iteration + 1)?;
                    self.current = Some(key);
                }
            }
            None => self.current = None,
        }
        let kind = serde_json::to_value(r.kind).ok();
        let kind = kind.as_ref().and_then(|k| k.as_str()).unwrap_or("event");
        let mut lines = r.content.lines();
        writeln!(
            self.out,
            "#{} [{}] {} -> {} ({kind}): {}",
            r.seq,
            r.step_id,
            r.sender,
            r.recipients.join(", "),
            lines.next().unwrap_or_default()
        )?;
        for line in lines {
            writeln!(self.out, "    {line}")?;
        }
        Ok(())
    }
}
