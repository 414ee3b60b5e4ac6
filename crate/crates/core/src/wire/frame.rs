//! Stream framing: a 4-byte big-endian unsigned length followed by exactly
//! that many payload bytes. Datagram payloads travel unframed and must fit
//! the datagram limit.

use std::io::{Read, Write};

use super::WireError;

pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;
pub const MAX_DATAGRAM_BYTES: usize = 60 * 1024;

pub fn frame_send<W: Write>(writer: &mut W, payload: &[u8]) -> Result<(), WireError> {
    if payload.len() > MAX_FRAME_BYTES {
        return Err(WireError::FrameTooLarge {
            len: payload.len(),
            max: MAX_FRAME_BYTES,
        });
    }
    writer.write_all(&(payload.len() as u32).to_be_bytes())?;
    writer.write_all(payload)?;
    writer.flush()?;
    Ok(())
}

pub fn frame_recv<R: Read>(reader: &mut R) -> Result<Vec<u8>, WireError> {
    let mut header = [0u8; 4];
    read_exact_or_truncated(reader, &mut header)?;
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(WireError::FrameTooLarge {
            len,
            max: MAX_FRAME_BYTES,
        });
    }
    let mut payload = vec![0u8; len];
    read_exact_or_truncated(reader, &mut payload)?;
    Ok(payload)
}

/// Bounds-checks a payload that will travel as a single datagram.
pub fn check_datagram(payload: &[u8]) -> Result<(), WireError> {
    if payload.len() > MAX_DATAGRAM_BYTES {
        return Err(WireError::DatagramTooLarge {
            len: payload.len(),
            max: MAX_DATAGRAM_BYTES,
        });
    }
    Ok(())
}

fn read_exact_or_truncated<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<(), WireError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            WireError::Truncated
        } else {
            WireError::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_encoding_matches_spec_bytes() {
        let mut out = Vec::new();
        frame_send(&mut out, b"hi").unwrap();
        assert_eq!(out, [0x00, 0x00, 0x00, 0x02, 0x68, 0x69]);

        let mut empty = Vec::new();
        frame_send(&mut empty, b"").unwrap();
        assert_eq!(empty, [0x00, 0x00, 0x00, 0x00]);
    }

    #[test]
    fn recv_recovers_sent_payload() {
        let mut buf = Vec::new();
        frame_send(&mut buf, b"payload").unwrap();
        frame_send(&mut buf, b"").unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        assert_eq!(frame_recv(&mut cursor).unwrap(), b"payload");
        assert_eq!(frame_recv(&mut cursor).unwrap(), b"");
    }

    #[test]
    fn truncation_and_oversize_are_distinct_errors() {
        let mut buf = Vec::new();
        frame_send(&mut buf, b"payload").unwrap();
        buf.truncate(6);
        let mut cursor = std::io::Cursor::new(buf);
        assert!(matches!(frame_recv(&mut cursor), Err(WireError::Truncated)));

        let header = ((MAX_FRAME_BYTES + 1) as u32).to_be_bytes();
        let mut cursor = std::io::Cursor::new(header.to_vec());
        assert!(matches!(
            frame_recv(&mut cursor),
            Err(WireError::FrameTooLarge { .. })
        ));

        let big = vec![0u8; MAX_DATAGRAM_BYTES + 1];
        assert!(matches!(
            check_datagram(&big),
            Err(WireError::DatagramTooLarge { .. })
        ));
    }
}
