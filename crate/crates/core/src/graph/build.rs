use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use super::{BipartiteGraph, DynamicGraph, GraphError, SnapshotGraph};

/// One `user_id,item_id,timestamp` record with raw ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub timestamp: i64,
}

/// Parses interaction records. Blank lines and `#` comments are skipped.
pub fn read_interactions(reader: impl BufRead) -> Result<Vec<Interaction>, GraphError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| GraphError::Parse { line: n + 1, message };
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let user = fields[0].parse().map_err(|_| parse_err(format!("bad user id `{}`", fields[0])))?;
        let item = fields[1].parse().map_err(|_| parse_err(format!("bad item id `{}`", fields[1])))?;
        let timestamp = fields[2].parse().map_err(|_| parse_err(format!("bad timestamp `{}`", fields[2])))?;
        out.push(Interaction { user, item, timestamp });
    }
    if out.is_empty() {
        return Err(GraphError::EmptyStream);
    }
    Ok(out)
}

pub fn write_interactions(mut w: impl Write, records: &[Interaction]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{},{},{}", r.user, r.item, r.timestamp)?;
    }
    Ok(())
}

/// Raw-id tables; position is the compact id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMaps {
    pub users: Vec<u64>,
    pub items: Vec<u64>,
}

impl IdMaps {
    pub fn user_checksum(&self) -> String {
        checksum(&self.users)
    }

    pub fn item_checksum(&self) -> String {
        checksum(&self.items)
    }

    pub fn user_index(&self, raw: u64) -> Option<u32> {
        self.users.binary_search(&raw).ok().map(|i| i as u32)
    }

    pub fn item_index(&self, raw: u64) -> Option<u32> {
        self.items.binary_search(&raw).ok().map(|i| i as u32)
    }

    /// `kind,compact,raw` lines.
    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        for (i, r) in self.users.iter().enumerate() {
            writeln!(w, "user,{i},{r}")?;
        }
        for (i, r) in self.items.iter().enumerate() {
            writeln!(w, "item,{i},{r}")?;
        }
        Ok(())
    }

    pub fn read(reader: impl BufRead) -> Result<Self, GraphError> {
        let mut maps = IdMaps::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: &str| GraphError::Parse {
                line: n + 1,
                message: message.to_string(),
            };
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 3 {
                return Err(err("expected kind,compact,raw"));
            }
            let compact: usize = f[1].parse().map_err(|_| err("bad compact id"))?;
            let raw: u64 = f[2].parse().map_err(|_| err("bad raw id"))?;
            let table = match f[0] {
                "user" => &mut maps.users,
                "item" => &mut maps.items,
                _ => return Err(err("kind must be user or item")),
            };
            if compact != table.len() {
                return Err(err("compact ids must be contiguous"));
            }
            table.push(raw);
        }
        Ok(maps)
    }
}

fn checksum(ids: &[u64]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Buckets a stream into snapshots of `granularity` seconds.
///
/// Buckets are aligned to the epoch (`floor(ts / granularity)`) and become
/// the snapshot time index; buckets without events produce no snapshot.
/// Raw ids are compacted in ascending raw order.
pub fn build_dynamic(interactions: &[Interaction], granularity: i64, split: usize) -> Result<(DynamicGraph, IdMaps), GraphError> {
    if interactions.is_empty() {
        return Err(GraphError::EmptyStream);
    }
    if granularity <= 0 {
        return Err(GraphError::BadGranularity(granularity));
    }
    let mut users: Vec<u64> = interactions.iter().map(|r| r.user).collect();
    let mut items: Vec<u64> = interactions.iter().map(|r| r.item).collect();
    users.sort_unstable();
    users.dedup();
    items.sort_unstable();
    items.dedup();
    let maps = IdMaps { users, items };

    let mut buckets: BTreeMap<i64, Vec<(u32, u32)>> = BTreeMap::new();
    for r in interactions {
        let u = maps.user_index(r.user).expect("collected above");
        let i = maps.item_index(r.item).expect("collected above");
        buckets.entry(r.timestamp.div_euclid(granularity)).or_default().push((u, i));
    }
    let (nu, ni) = (maps.users.len(), maps.items.len());
    let snapshots = buckets
        .into_iter()
        .map(|(t, edges)| Ok(SnapshotGraph::new(t, BipartiteGraph::from_edges(nu, ni, edges)?)))
        .collect::<Result<Vec<_>, GraphError>>()?;
    Ok((DynamicGraph::new(snapshots, split)?, maps))
}

#[cfg(test)]
mod tests {
    use super::*;

    const DAY: i64 = 86_400;

    #[test]
    fn parse_reports_line_numbers() {
        let err = read_interactions("1,2,3\n\n4,x,5\n".as_bytes()).unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 3, .. }), "{err}");
        assert!(matches!(read_interactions("# only\n".as_bytes()), Err(GraphError::EmptyStream)));
    }

    #[test]
    fn ten_events_two_days() {
        let recs: Vec<Interaction> = (0..10)
            .map(|k| Interaction {
                user: 100 + k % 3,
                item: 7 + k % 4,
                timestamp: k as i64 * DAY / 5,
            })
            .collect();
        let (g, maps) = build_dynamic(&recs, DAY, 1).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.pretrain_split(), 1);
        assert_eq!(g.finetune_snapshots().len(), 1);
        assert_eq!(maps.users, vec![100, 101, 102]);
        assert_eq!(g.user_count(), 3);
        assert_eq!(g.item_count(), 4);
    }

    #[test]
    fn duplicate_events_collapse() {
        let r = Interaction { user: 1, item: 1, timestamp: 5 };
        let s = Interaction { user: 1, item: 1, timestamp: 15 };
        let (g, _) = build_dynamic(&[r, r, s], 10, 1).unwrap();
        assert_eq!(g.snapshot(0).edge_count(), 1);
    }

    #[test]
    fn id_maps_round_trip() {
        let maps = IdMaps {
            users: vec![3, 9],
            items: vec![1],
        };
        let mut buf = Vec::new();
        maps.write(&mut buf).unwrap();
        let back = IdMaps::read(buf.as_slice()).unwrap();
        assert_eq!(back, maps);
        assert_eq!(back.user_checksum(), maps.user_checksum());
    }
}
