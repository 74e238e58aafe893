//! Classic pcap and simple pcapng readers, plus a classic pcap writer for
//! fixtures and tooling.
//!
//! Classic pcap: micro- and nanosecond variants in either byte order.
//! Pcapng: section/interface/packet blocks only; name-resolution and
//! statistics blocks are skipped, anything else is rejected with a clear
//! error. A truncated trailing record is skipped and counted as a warning.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::IngestError;

const MAX_PACKET_LEN: u32 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkType {
    Ethernet,
    RawIp,
}

fn link_type_of(code: u32) -> Result<LinkType, IngestError> {
    match code {
        1 => Ok(LinkType::Ethernet),
        // LINKTYPE_RAW and the explicit v4/v6 raw variants
        101 | 228 | 229 => Ok(LinkType::RawIp),
        other => Err(IngestError::UnsupportedLinkType(other)),
    }
}

#[derive(Debug, Clone)]
pub struct RawPacket {
    /// Microseconds since the epoch.
    pub timestamp_us: i64,
    pub link_type: LinkType,
    pub bytes: Vec<u8>,
}

enum Format {
    Classic { big_endian: bool, nanos: bool, link: LinkType },
    PcapNg { big_endian: bool, interfaces: Vec<u32> },
}

/// Streaming packet reader; iterate to drain, then read `warnings()`.
pub struct CaptureReader {
    rd: BufReader<File>,
    format: Format,
    warnings: u32,
    done: bool,
}

/// Open a capture file and infer its format from the magic number.
pub fn parse_capture(path: &Path) -> Result<CaptureReader, IngestError> {
    let file = File::open(path)?;
    let mut rd = BufReader::new(file);
    let mut magic = [0u8; 4];
    if read_full(&mut rd, &mut magic)? < 4 {
        return Err(IngestError::UnsupportedFormat);
    }
    let format = match magic {
        [0xD4, 0xC3, 0xB2, 0xA1] => classic_header(&mut rd, false, false)?,
        [0xA1, 0xB2, 0xC3, 0xD4] => classic_header(&mut rd, true, false)?,
        [0x4D, 0x3C, 0xB2, 0xA1] => classic_header(&mut rd, false, true)?,
        [0xA1, 0xB2, 0x3C, 0x4D] => classic_header(&mut rd, true, true)?,
        [0x0A, 0x0D, 0x0D, 0x0A] => pcapng_section_header(&mut rd)?,
        _ => return Err(IngestError::UnsupportedFormat),
    };
    Ok(CaptureReader { rd, format, warnings: 0, done: false })
}

impl CaptureReader {
    /// Count of truncated records skipped at end of file.
    pub fn warnings(&self) -> u32 {
        self.warnings
    }
}

fn classic_header(
    rd: &mut BufReader<File>,
    big_endian: bool,
    nanos: bool,
) -> Result<Format, IngestError> {
    let mut rest = [0u8; 20];
    if read_full(rd, &mut rest)? < 20 {
        return Err(IngestError::MalformedHeader("global header shorter than 24 bytes".into()));
    }
    let network = read_u32(&rest[16..20], big_endian);
    Ok(Format::Classic { big_endian, nanos, link: link_type_of(network)? })
}

fn pcapng_section_header(rd: &mut BufReader<File>) -> Result<Format, IngestError> {
    let mut head = [0u8; 8];
    if read_full(rd, &mut head)? < 8 {
        return Err(IngestError::MalformedHeader("section header block truncated".into()));
    }
    let big_endian = match &head[4..8] {
        [0x1A, 0x2B, 0x3C, 0x4D] => true,
        [0x4D, 0x3C, 0x2B, 0x1A] => false,
        _ => return Err(IngestError::MalformedHeader("unknown byte-order magic".into())),
    };
    let total_len = read_u32(&head[0..4], big_endian) as usize;
    if total_len < 28 || total_len % 4 != 0 {
        return Err(IngestError::MalformedHeader("bad section header length".into()));
    }
    // skip version, section length and options up to the trailing length
    skip(rd, total_len - 12)
        .map_err(|_| IngestError::MalformedHeader("section header block truncated".into()))?;
    let mut trailer = [0u8; 4];
    if read_full(rd, &mut trailer)? < 4 {
        return Err(IngestError::MalformedHeader("section header block truncated".into()));
    }
    Ok(Format::PcapNg { big_endian, interfaces: Vec::new() })
}

impl Iterator for CaptureReader {
    type Item = Result<RawPacket, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            let step = match &self.format {
                Format::Classic { .. } => self.next_classic(),
                Format::PcapNg { .. } => self.next_pcapng(),
            };
            match step {
                Ok(Some(pkt)) => {
                    if pkt.bytes.is_empty() {
                        self.warnings += 1;
                        continue;
                    }
                    return Some(Ok(pkt));
                }
                Ok(None) => {
                    if self.done {
                        return None;
                    }
                    continue; // non-packet block consumed
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
    }
}

impl CaptureReader {
    fn next_classic(&mut self) -> Result<Option<RawPacket>, IngestError> {
        let Format::Classic { big_endian, nanos, link } = self.format else { unreachable!() };
        let mut head = [0u8; 16];
        let got = read_full(&mut self.rd, &mut head)?;
        if got == 0 {
            self.done = true;
            return Ok(None);
        }
        if got < 16 {
            self.warnings += 1;
            self.done = true;
            return Ok(None);
        }
        let ts_sec = read_u32(&head[0..4], big_endian) as i64;
        let ts_frac = read_u32(&head[4..8], big_endian) as i64;
        let incl_len = read_u32(&head[8..12], big_endian);
        if incl_len > MAX_PACKET_LEN {
            return Err(IngestError::MalformedRecord(format!(
                "captured length {incl_len} is implausible"
            )));
        }
        let mut bytes = vec![0u8; incl_len as usize];
        if read_full(&mut self.rd, &mut bytes)? < bytes.len() {
            self.warnings += 1;
            self.done = true;
            return Ok(None);
        }
        let timestamp_us = ts_sec * 1_000_000 + if nanos { ts_frac / 1000 } else { ts_frac };
        Ok(Some(RawPacket { timestamp_us, link_type: link, bytes }))
    }

    fn next_pcapng(&mut self) -> Result<Option<RawPacket>, IngestError> {
        let Format::PcapNg { big_endian, .. } = self.format else { unreachable!() };
        let mut head = [0u8; 8];
        let got = read_full(&mut self.rd, &mut head)?;
        if got == 0 {
            self.done = true;
            return Ok(None);
        }
        if got < 8 {
            self.warnings += 1;
            self.done = true;
            return Ok(None);
        }
        let block_type = read_u32(&head[0..4], big_endian);
        let total_len = read_u32(&head[4..8], big_endian) as usize;
        if total_len < 12 || total_len % 4 != 0 {
            return Err(IngestError::MalformedRecord(format!(
                "pcapng block length {total_len} is invalid"
            )));
        }
        let body_len = total_len - 12;
        let mut body = vec![0u8; body_len];
        if read_full(&mut self.rd, &mut body)? < body_len {
            self.warnings += 1;
            self.done = true;
            return Ok(None);
        }
        let mut trailer = [0u8; 4];
        if read_full(&mut self.rd, &mut trailer)? < 4 {
            self.warnings += 1;
            self.done = true;
            return Ok(None);
        }

        match block_type {
            0x0000_0001 => {
                // interface description
                if body.len() < 8 {
                    return Err(IngestError::MalformedRecord("IDB too short".into()));
                }
                let lt = read_u16(&body[0..2], big_endian) as u32;
                if let Format::PcapNg { interfaces, .. } = &mut self.format {
                    interfaces.push(lt);
                }
                Ok(None)
            }
            0x0000_0006 => {
                // enhanced packet
                if body.len() < 20 {
                    return Err(IngestError::MalformedRecord("EPB too short".into()));
                }
                let iface = read_u32(&body[0..4], big_endian);
                let ts_hi = read_u32(&body[4..8], big_endian) as u64;
                let ts_lo = read_u32(&body[8..12], big_endian) as u64;
                let cap_len = read_u32(&body[12..16], big_endian) as usize;
                if cap_len > body.len() - 20 {
                    return Err(IngestError::MalformedRecord("EPB captured length overflow".into()));
                }
                let link = self.pcapng_link(iface)?;
                // default if_tsresol is microseconds
                let timestamp_us = ((ts_hi << 32) | ts_lo) as i64;
                Ok(Some(RawPacket {
                    timestamp_us,
                    link_type: link,
                    bytes: body[20..20 + cap_len].to_vec(),
                }))
            }
            0x0000_0003 => {
                // simple packet: everything after orig_len, minus padding
                if body.len() < 4 {
                    return Err(IngestError::MalformedRecord("SPB too short".into()));
                }
                let orig_len = read_u32(&body[0..4], big_endian) as usize;
                let cap_len = orig_len.min(body.len() - 4);
                let link = self.pcapng_link(0)?;
                Ok(Some(RawPacket {
                    timestamp_us: 0,
                    link_type: link,
                    bytes: body[4..4 + cap_len].to_vec(),
                }))
            }
            // name resolution and interface statistics are harmless
            0x0000_0004 | 0x0000_0005 => Ok(None),
            other => Err(IngestError::UnsupportedPcapngBlock(other)),
        }
    }

    fn pcapng_link(&self, iface: u32) -> Result<LinkType, IngestError> {
        let Format::PcapNg { interfaces, .. } = &self.format else { unreachable!() };
        let code = *interfaces
            .get(iface as usize)
            .ok_or_else(|| IngestError::MalformedRecord(format!("unknown interface {iface}")))?;
        link_type_of(code)
    }
}

/// Write a classic little-endian microsecond pcap.
pub fn write_pcap(
    path: &Path,
    link: LinkType,
    packets: &[(i64, Vec<u8>)],
) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&[0xD4, 0xC3, 0xB2, 0xA1])?;
    w.write_all(&2u16.to_le_bytes())?;
    w.write_all(&4u16.to_le_bytes())?;
    w.write_all(&[0u8; 8])?; // thiszone + sigfigs
    w.write_all(&65_535u32.to_le_bytes())?;
    let code: u32 = match link {
        LinkType::Ethernet => 1,
        LinkType::RawIp => 101,
    };
    w.write_all(&code.to_le_bytes())?;
    for (ts, bytes) in packets {
        let sec = (ts / 1_000_000) as u32;
        let usec = (ts.rem_euclid(1_000_000)) as u32;
        w.write_all(&sec.to_le_bytes())?;
        w.write_all(&usec.to_le_bytes())?;
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(b: &[u8], big_endian: bool) -> u32 {
    let arr: [u8; 4] = b[..4].try_into().unwrap();
    if big_endian {
        u32::from_be_bytes(arr)
    } else {
        u32::from_le_bytes(arr)
    }
}

fn read_u16(b: &[u8], big_endian: bool) -> u16 {
    let arr: [u8; 2] = b[..2].try_into().unwrap();
    if big_endian {
        u16::from_be_bytes(arr)
    } else {
        u16::from_le_bytes(arr)
    }
}

/// Read as many bytes as possible into `buf`; fewer than `buf.len()` means
/// end of file.
fn read_full(rd: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut at = 0;
    while at < buf.len() {
        let n = rd.read(&mut buf[at..])?;
        if n == 0 {
            break;
        }
        at += n;
    }
    Ok(at)
}

fn skip(rd: &mut impl Read, len: usize) -> std::io::Result<()> {
    let mut remaining = len;
    let mut chunk = [0u8; 256];
    while remaining > 0 {
        let take = remaining.min(chunk.len());
        let n = rd.read(&mut chunk[..take])?;
        if n == 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "skip"));
        }
        remaining -= n;
    }
    Ok(())
}
