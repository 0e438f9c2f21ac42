//! Embedding export. TSV rows are keyed by `u:<raw id>` or `i:<raw id>`
//! because user and item id spaces overlap; the binary format stores rows in
//! node order (users ascending by raw id, then items).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sac::{Checkpoint32, NodeKind};

pub const EXPORT_MAGIC: &[u8; 4] = b"SACE";
pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Tsv,
    Binary,
}

pub fn node_label(kind: NodeKind, raw: u64) -> String {
    match kind {
        NodeKind::User => format!("u:{raw}"),
        NodeKind::Item => format!("i:{raw}"),
    }
}

fn labels(ckpt: &Checkpoint32) -> impl Iterator<Item = String> + '_ {
    let users = ckpt.user_ids.iter().map(|&r| node_label(NodeKind::User, r));
    let items = ckpt.item_ids.iter().map(|&r| node_label(NodeKind::Item, r));
    users.chain(items)
}

pub fn write(ckpt: &Checkpoint32, path: &Path, format: Format) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let table = &ckpt.params.node_embeddings;
    match format {
        Format::Tsv => {
            for (r, label) in labels(ckpt).enumerate() {
                write!(w, "{label}")?;
                for v in table.row(r) {
                    // shortest repr that parses back to the same f32
                    write!(w, "\t{v:?}")?;
                }
                writeln!(w)?;
            }
        }
        Format::Binary => {
            w.write_all(EXPORT_MAGIC)?;
            w.write_all(&EXPORT_VERSION.to_le_bytes())?;
            w.write_all(&(table.rows() as u64).to_le_bytes())?;
            w.write_all(&(table.last_dim() as u32).to_le_bytes())?;
            for v in table.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()
}
