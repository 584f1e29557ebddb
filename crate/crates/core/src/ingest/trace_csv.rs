use std::io::Read;

use super::{Capture, IngestError, PacketRecord};
use crate::mac::MacAddress;

/// Required header names, in the order they are mapped onto [`PacketRecord`].
pub const TRACE_COLUMNS: [&str; 4] = ["frame.time_epoch", "eth.src", "ip.len", "tcp.window_size"];

fn field_text(b: &[u8]) -> Option<&str> {
    std::str::from_utf8(b)
        .ok()
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

fn parse_row(fields: [&[u8]; 4]) -> Option<PacketRecord> {
    let record = PacketRecord {
        timestamp: field_text(fields[0])?.parse().ok()?,
        src_mac: field_text(fields[1])?.parse::<MacAddress>().ok()?,
        ip_total_length: field_text(fields[2])?.parse().ok()?,
        tcp_window: field_text(fields[3])?.parse().ok()?,
    };
    record.is_valid().then_some(record)
}

/// Reads a dissector-exported trace CSV. Extra columns are ignored; rows with
/// a missing or unparseable required field are counted as malformed.
pub fn read_trace_csv<R: Read>(reader: R) -> Result<Capture, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.byte_headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim_ascii().is_empty()) {
        return Err(IngestError::MissingHeader);
    }
    let mut positions = [0usize; 4];
    for (slot, name) in positions.iter_mut().zip(TRACE_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim_ascii() == name.as_bytes())
            .ok_or(IngestError::MissingColumn(name))?;
    }

    let mut capture = Capture::default();
    let mut row = csv::ByteRecord::new();
    while rdr.read_byte_record(&mut row)? {
        capture.stats.packets_seen += 1;
        let fields = positions.map(|p| row.get(p).unwrap_or(b""));
        match parse_row(fields) {
            Some(record) => {
                capture.stats.packets_kept += 1;
                capture.records.push(record);
            }
            None => capture.stats.packets_skipped_malformed += 1,
        }
    }
    Ok(capture)
}
