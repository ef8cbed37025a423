//! Checkpoints: every named parameter tensor plus the batch-norm running
//! buffers, with the model configuration inline so a checkpoint alone
//! rebuilds the network. Stored as a text header (newline + NUL terminated)
//! followed by float64 LE payload; a sibling `.names` text manifest lists
//! the tensor names and shapes.

use std::fs;
use std::path::Path;

use rhythmlab_core::agcacl::LossState;
use rhythmlab_core::model::{ModelConfig, ModelState};
use rhythmlab_core::Tensor;

use crate::{CliError, Result};

const MAGIC: &str = "ckpt 1";

fn config_lines(cfg: &ModelConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("cfg ecg_channels {}\n", cfg.ecg_channels));
    s.push_str(&format!("cfg iegm_channels {}\n", cfg.iegm_channels));
    s.push_str(&format!("cfg input_len {}\n", cfg.input_len));
    s.push_str(&format!(
        "cfg stage_channels {},{},{},{}\n",
        cfg.stage_channels[0], cfg.stage_channels[1], cfg.stage_channels[2], cfg.stage_channels[3]
    ));
    s.push_str(&format!("cfg blocks_per_stage {}\n", cfg.blocks_per_stage));
    s.push_str(&format!("cfg embed_dim {}\n", cfg.embed_dim));
    s.push_str(&format!("cfg fused_dim {}\n", cfg.fused_dim));
    s.push_str(&format!("cfg head_dim {}\n", cfg.head_dim));
    s.push_str(&format!("cfg heads {}\n", cfg.heads));
    s.push_str(&format!("cfg ff_dim {}\n", cfg.ff_dim));
    s.push_str(&format!("cfg dropout {:?}\n", cfg.dropout));
    s.push_str(&format!("cfg classes {}\n", cfg.classes));
    s
}

fn parse_config(entries: &[(String, String)], origin: &Path) -> Result<ModelConfig> {
    let bad = |detail: String| CliError::Format { what: "checkpoint", path: origin.to_path_buf(), detail };
    let get = |key: &str| -> Result<&str> {
        entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("missing cfg {key}")))
    };
    let usize_of = |key: &str| -> Result<usize> {
        get(key)?.parse::<usize>().map_err(|e| bad(format!("cfg {key}: {e}")))
    };
    let stages: Vec<usize> = get("stage_channels")?
        .split(',')
        .map(|v| v.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(format!("cfg stage_channels: {e}")))?;
    if stages.len() != 4 {
        return Err(bad("stage_channels must list 4 widths".into()));
    }
    Ok(ModelConfig {
        ecg_channels: usize_of("ecg_channels")?,
        iegm_channels: usize_of("iegm_channels")?,
        input_len: usize_of("input_len")?,
        stage_channels: [stages[0], stages[1], stages[2], stages[3]],
        blocks_per_stage: usize_of("blocks_per_stage")?,
        embed_dim: usize_of("embed_dim")?,
        fused_dim: usize_of("fused_dim")?,
        head_dim: usize_of("head_dim")?,
        heads: usize_of("heads")?,
        ff_dim: usize_of("ff_dim")?,
        dropout: get("dropout")?.parse::<f64>().map_err(|e| bad(format!("cfg dropout: {e}")))?,
        classes: usize_of("classes")?,
    })
}

pub fn encode_checkpoint(model: &ModelState) -> Vec<u8> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&config_lines(&model.cfg));
    for i in 0..model.params.len() {
        let t = model.params.tensor(i);
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {} {}\n", model.params.name(i), dims.join(",")));
    }
    for (i, buf) in model.bn.iter().enumerate() {
        header.push_str(&format!("buffer bn.{i}.running_mean {}\n", buf.running_mean.len()));
        header.push_str(&format!("buffer bn.{i}.running_var {}\n", buf.running_var.len()));
    }
    let mut bytes = header.into_bytes();
    bytes.push(0);
    for i in 0..model.params.len() {
        for v in model.params.tensor(i).data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for buf in &model.bn {
        for v in buf.running_mean.iter().chain(&buf.running_var) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<ModelState> {
    let bad = |detail: String| CliError::Format { what: "checkpoint", path: origin.to_path_buf(), detail };
    let nul = bytes.iter().position(|&b| b == 0).ok_or_else(|| bad("missing header terminator".into()))?;
    let header = std::str::from_utf8(&bytes[..nul]).map_err(|e| bad(format!("non-UTF-8 header: {e}")))?;
    let mut cfg_entries: Vec<(String, String)> = Vec::new();
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    let mut buffers: Vec<(String, usize)> = Vec::new();
    for (i, line) in header.lines().enumerate() {
        if i == 0 {
            if line != MAGIC {
                return Err(bad(format!("bad magic {line:?}")));
            }
            continue;
        }
        let mut parts = line.splitn(3, ' ');
        let kind = parts.next().unwrap_or_default();
        let name = parts.next().ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        let rest = parts.next().ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        match kind {
            "cfg" => cfg_entries.push((name.to_string(), rest.to_string())),
            "tensor" => {
                let dims: Vec<usize> = rest
                    .split(',')
                    .map(|v| v.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("shape of {name}: {e}")))?;
                tensors.push((name.to_string(), dims));
            }
            "buffer" => {
                let len = rest.parse::<usize>().map_err(|e| bad(format!("buffer {name}: {e}")))?;
                buffers.push((name.to_string(), len));
            }
            other => return Err(bad(format!("unknown entry {other:?}"))),
        }
    }
    let cfg = parse_config(&cfg_entries, origin)?;
    let mut model = ModelState::new(cfg, 0)?;
    if tensors.len() != model.params.len() {
        return Err(bad(format!("{} tensors, model needs {}", tensors.len(), model.params.len())));
    }

    let mut offset = nul + 1;
    let mut take = |count: usize| -> Result<Vec<f64>> {
        let need = count * 8;
        if offset + need > bytes.len() {
            return Err(bad(format!("truncated payload at byte {offset}")));
        }
        let vals = bytes[offset..offset + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        offset += need;
        Ok(vals)
    };

    for (i, (name, dims)) in tensors.iter().enumerate() {
        if model.params.name(i) != name {
            return Err(bad(format!("tensor {i} is {name:?}, expected {:?}", model.params.name(i))));
        }
        let numel: usize = dims.iter().product();
        let values = take(numel)?;
        *model.params.tensor_mut(i) = Tensor::new(dims, values)?;
    }
    let expect_buffers = model.bn.len() * 2;
    if buffers.len() != expect_buffers {
        return Err(bad(format!("{} buffers, model needs {expect_buffers}", buffers.len())));
    }
    for (bi, chunk) in buffers.chunks(2).enumerate() {
        let mean = take(chunk[0].1)?;
        let var = take(chunk[1].1)?;
        model.bn[bi].running_mean = mean;
        model.bn[bi].running_var = var;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(model)
}

pub fn save_checkpoint(dir: &Path, model: &ModelState) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let params = dir.join("params.ckpt");
    fs::write(&params, encode_checkpoint(model)).map_err(CliError::io(&params))?;
    let mut names = String::new();
    for i in 0..model.params.len() {
        let dims: Vec<String> = model.params.tensor(i).shape().iter().map(|d| d.to_string()).collect();
        names.push_str(&format!("{} {}\n", model.params.name(i), dims.join(",")));
    }
    let names_path = dir.join("params.names");
    fs::write(&names_path, names).map_err(CliError::io(&names_path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    decode_checkpoint(&bytes, path)
}

fn matrix_text(t: &Tensor) -> String {
    let mut out = String::new();
    let cols = *t.shape().last().unwrap_or(&1);
    for row in t.data().chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_matrix(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CliError::Format { what: "matrix file", path: path.to_path_buf(), detail: format!("{e}") })?;
        rows.push(row);
    }
    Ok(Tensor::from_rows(&rows)?)
}

/// Write one epoch's coefficient snapshot: similarity matrix `S`, repulsion
/// matrix `phi`, alignment vector `psi`, class weights `alpha`.
pub fn save_coefficients(dir: &Path, state: &LossState) -> Result<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let c = state.classes();
    let write = |name: &str, t: &Tensor| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, matrix_text(t)).map_err(CliError::io(&p))
    };
    write("S.txt", &state.similarity)?;
    write("phi.txt", &state.repel)?;
    write("psi.txt", &Tensor::new(&[1, c], state.align.clone())?)?;
    write("alpha.txt", &Tensor::new(&[1, c], state.class_weights.clone())?)?;
    Ok(())
}
