//! CSV event trace.

use std::fmt::Display;
use std::io::{self, BufWriter, Write};
use std::sync::{Arc, Mutex};

use crate::model::MeshCoordinate;

pub const TRACE_HEADER: &str = "cycle,event,node_x,node_y,port_or_slot,packet_id,flit_ordinal,detail";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Inj,
    Fwd,
    Grant,
    AvRcv,
    DataIn,
    SvcStart,
    SvcEnd,
    RecfgStart,
    RecfgEnd,
    Ctrl,
    Decision,
}

impl TraceEvent {
    pub fn name(self) -> &'static str {
        match self {
            TraceEvent::Inj => "INJ",
            TraceEvent::Fwd => "FWD",
            TraceEvent::Grant => "GRANT",
            TraceEvent::AvRcv => "AVRCV",
            TraceEvent::DataIn => "DATAIN",
            TraceEvent::SvcStart => "SVC_START",
            TraceEvent::SvcEnd => "SVC_END",
            TraceEvent::RecfgStart => "RECFG_START",
            TraceEvent::RecfgEnd => "RECFG_END",
            TraceEvent::Ctrl => "CTRL",
            TraceEvent::Decision => "DECISION",
        }
    }
}

/// Destination for trace records; disabled traces cost one branch per event.
pub struct Trace {
    sink: Option<BufWriter<Box<dyn Write + Send>>>,
    error: Option<io::Error>,
}

impl Trace {
    pub fn disabled() -> Self {
        Self { sink: None, error: None }
    }

    pub fn to_writer(w: Box<dyn Write + Send>) -> Self {
        let mut t = Self { sink: Some(BufWriter::new(w)), error: None };
        t.write_line(format_args!("{TRACE_HEADER}"));
        t
    }

    pub fn is_enabled(&self) -> bool {
        self.sink.is_some()
    }

    fn write_line(&mut self, args: std::fmt::Arguments<'_>) {
        if let Some(sink) = self.sink.as_mut() {
            if let Err(e) = sink.write_fmt(args).and_then(|_| sink.write_all(b"\n")) {
                self.error.get_or_insert(e);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &mut self,
        cycle: u64,
        event: TraceEvent,
        node: MeshCoordinate,
        port_or_slot: &str,
        packet: Option<u16>,
        ordinal: Option<u16>,
        detail: impl Display,
    ) {
        if self.sink.is_none() {
            return;
        }
        let packet = packet.map(|p| p.to_string()).unwrap_or_default();
        let ordinal = ordinal.map(|o| o.to_string()).unwrap_or_default();
        self.write_line(format_args!(
            "{cycle},{},{},{},{port_or_slot},{packet},{ordinal},{detail}",
            event.name(),
            node.x,
            node.y
        ));
    }

    /// Flushes buffered records and reports the first write failure.
    pub fn finish(&mut self) -> io::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        match self.sink.as_mut() {
            Some(s) => s.flush(),
            None => Ok(()),
        }
    }
}

impl std::fmt::Debug for Trace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trace").field("enabled", &self.is_enabled()).finish()
    }
}

/// Cloneable in-memory writer, handy for capturing a trace.
#[derive(Debug, Clone, Default)]
pub struct SharedBuffer(Arc<Mutex<Vec<u8>>>);

impl SharedBuffer {
    pub fn contents(&self) -> Vec<u8> {
        self.0.lock().expect("buffer lock").clone()
    }

    pub fn text(&self) -> String {
        String::from_utf8(self.contents()).expect("trace is UTF-8")
    }
}

impl Write for SharedBuffer {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().expect("buffer lock").extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_csv_lines() {
        let buf = SharedBuffer::default();
        let mut t = Trace::to_writer(Box::new(buf.clone()));
        t.record(7, TraceEvent::Fwd, MeshCoordinate::new(1, 2), "East", Some(3), Some(0), "in=Local0");
        t.record(8, TraceEvent::Decision, MeshCoordinate::new(0, 0), "", None, None, "Queued");
        t.finish().unwrap();
        assert_eq!(buf.text(), format!("{TRACE_HEADER}\n7,FWD,1,2,East,3,0,in=Local0\n8,DECISION,0,0,,,,Queued\n"));
    }

    #[test]
    fn disabled_trace_is_inert() {
        let mut t = Trace::disabled();
        t.record(1, TraceEvent::Inj, MeshCoordinate::new(0, 0), "Local0", None, None, "");
        assert!(t.finish().is_ok());
        assert!(!t.is_enabled());
    }
}
