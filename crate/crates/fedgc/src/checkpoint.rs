//! Checkpoint directories: `manifest.txt`, `theta.fgc` and one `client_<k>.fgc` head per
//! client.
//!
//! ```text
//! fgc-checkpoint 1
//! round 200
//! activation relu
//! dims 32 64 32
//! clients 2
//! client 0 0 1
//! client 1 2 3
//! ```
//!
//! Each `client` line lists the global class ids of that client's head columns in order.

use std::fmt::Write as _;
use std::path::Path;

use fedgc_core::federation::ServerState;
use fedgc_core::linalg::Matrix;
use fedgc_core::nn::BackboneParams;

use crate::config::activation_name;
use crate::error::{io_err, Error, Result};
use crate::formats::{load_backbone, load_tensors, save_backbone, save_tensors};

const MANIFEST: &str = "manifest.txt";
const VERSION_LINE: &str = "fgc-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: usize,
    pub theta: BackboneParams,
    pub heads: Vec<Matrix>,
    pub client_classes: Vec<Vec<usize>>,
}

impl Checkpoint {
    pub fn from_server(server: &ServerState) -> Self {
        let emb = &server.embeddings;
        let k = emb.num_clients();
        Checkpoint {
            round: server.round,
            theta: server.theta.clone(),
            heads: (0..k).map(|c| emb.head(c)).collect(),
            client_classes: (0..k)
                .map(|c| emb.client_columns(c).iter().map(|&j| server.column_classes[j]).collect())
                .collect(),
        }
    }
}

fn bad(dir: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: dir.join(MANIFEST),
        message: message.into(),
    }
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut m = String::new();
    let dims: Vec<String> = ckpt.theta.dims().iter().map(|d| d.to_string()).collect();
    writeln!(m, "{VERSION_LINE}").ok();
    writeln!(m, "round {}", ckpt.round).ok();
    writeln!(m, "activation {}", activation_name(ckpt.theta.activation())).ok();
    writeln!(m, "dims {}", dims.join(" ")).ok();
    writeln!(m, "clients {}", ckpt.heads.len()).ok();
    for (k, classes) in ckpt.client_classes.iter().enumerate() {
        let ids: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
        writeln!(m, "client {k} {}", ids.join(" ")).ok();
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, m).map_err(io_err(&path))?;
    save_backbone(&dir.join("theta.fgc"), &ckpt.theta)?;
    for (k, head) in ckpt.heads.iter().enumerate() {
        save_tensors(&dir.join(format!("client_{k}.fgc")), &[head])?;
    }
    Ok(())
}

fn parse_ids(dir: &Path, fields: &[&str]) -> Result<Vec<usize>> {
    fields
        .iter()
        .map(|f| f.parse().map_err(|_| bad(dir, format!("bad integer `{f}`"))))
        .collect()
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = text.lines();
    if lines.next() != Some(VERSION_LINE) {
        return Err(bad(dir, "missing or unsupported version line"));
    }
    let (mut round, mut activation, mut dims, mut clients) = (None, None, None, None);
    let mut client_classes: Vec<Option<Vec<usize>>> = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            ["round", r] => round = Some(parse_ids(dir, &[r])?[0]),
            ["activation", a] => {
                activation = Some(match *a {
                    "relu" => fedgc_core::nn::Activation::Relu,
                    "tanh" => fedgc_core::nn::Activation::Tanh,
                    _ => return Err(bad(dir, format!("unknown activation `{a}`"))),
                })
            }
            ["dims", rest @ ..] => dims = Some(parse_ids(dir, rest)?),
            ["clients", n] => {
                let n = parse_ids(dir, &[n])?[0];
                clients = Some(n);
                client_classes = vec![None; n];
            }
            ["client", k, rest @ ..] => {
                let k = parse_ids(dir, &[k])?[0];
                let slot = client_classes
                    .get_mut(k)
                    .ok_or_else(|| bad(dir, format!("client {k} listed before `clients` or out of range")))?;
                *slot = Some(parse_ids(dir, rest)?);
            }
            _ => return Err(bad(dir, format!("unrecognised line `{line}`"))),
        }
    }
    let missing = |what: &str| bad(dir, format!("missing `{what}` line"));
    let round = round.ok_or_else(|| missing("round"))?;
    let activation = activation.ok_or_else(|| missing("activation"))?;
    let dims = dims.ok_or_else(|| missing("dims"))?;
    let clients = clients.ok_or_else(|| missing("clients"))?;
    let client_classes = client_classes
        .into_iter()
        .enumerate()
        .map(|(k, c)| c.ok_or_else(|| bad(dir, format!("no class list for client {k}"))))
        .collect::<Result<Vec<_>>>()?;

    let theta = load_backbone(&dir.join("theta.fgc"), activation)?;
    if theta.dims() != dims {
        return Err(bad(dir, format!("dims {:?} disagree with theta.fgc {:?}", dims, theta.dims())));
    }
    let mut heads = Vec::with_capacity(clients);
    for (k, classes) in client_classes.iter().enumerate() {
        let p = dir.join(format!("client_{k}.fgc"));
        let mut t = load_tensors(&p)?;
        if t.len() != 1 {
            return Err(Error::Format {
                path: p,
                message: format!("expected one head tensor, found {}", t.len()),
            });
        }
        let head = t.remove(0);
        if head.cols() != classes.len() || head.rows() != theta.output_dim() {
            return Err(Error::Format {
                path: p,
                message: format!(
                    "head is {}x{}, expected {}x{}",
                    head.rows(),
                    head.cols(),
                    theta.output_dim(),
                    classes.len()
                ),
            });
        }
        heads.push(head);
    }
    Ok(Checkpoint {
        round,
        theta,
        heads,
        client_classes,
    })
}
