//! JSON checkpoints for heads and toy models.
//!
//! ```json
//! {"kind": "slimspec", "v": 512, "d": 64, "r": 8,
//!  "matrices": {"w_up": {"rows": 512, "cols": 8, "data": [...]}, ...}}
//! ```
//!
//! Kinds: `full`, `slimspec`, `truncated` (with `v_tr` and `index_map`),
//! `routed` (with `r` and `k`), `toy_target` and `drafter_backbone`.
//! Matrix data is row-major and written with shortest round-trip decimals,
//! so a reload reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::{TokenId, Vocabulary};
use crate::error::{LabError, Result};
use crate::heads::{DraftHead, FullHead, RoutedHead, SlimSpecHead, TruncatedHead};
use crate::linalg::{Matrix, Scalar};
use crate::models::{DrafterBackbone, ToyTargetModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|x| x.to_f64()).collect(),
        }
    }

    fn to_matrix<T: Scalar>(&self) -> Result<Matrix<T>> {
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(LabError::Checkpoint("matrix data has non-finite entries".into()));
        }
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| T::from_f64(x)).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: String,
    pub v: usize,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_tr: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_map: Option<Vec<u32>>,
    /// Target MLP width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_h: Option<usize>,
    /// Context window of a model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub matrices: BTreeMap<String, MatrixJson>,
}

impl Checkpoint {
    fn bare(kind: &str, v: usize, d: usize) -> Self {
        Self {
            kind: kind.to_string(),
            v,
            d,
            r: None,
            v_tr: None,
            k: None,
            index_map: None,
            d_h: None,
            c: None,
            logit_scale: None,
            seed: None,
            matrices: BTreeMap::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LabError::Checkpoint(format!("cannot parse {}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    fn matrix<T: Scalar>(&self, name: &str) -> Result<Matrix<T>> {
        self.matrices
            .get(name)
            .ok_or_else(|| LabError::Checkpoint(format!("{} checkpoint lacks matrix {name:?}", self.kind)))?
            .to_matrix()
    }

    fn require(&self, field: Option<usize>, name: &str) -> Result<usize> {
        field.ok_or_else(|| LabError::Checkpoint(format!("{} checkpoint lacks field {name:?}", self.kind)))
    }

    fn check_dims<T: Scalar>(&self, m: &Matrix<T>, name: &str, rows: usize, cols: usize) -> Result<()> {
        if m.rows() != rows || m.cols() != cols {
            return Err(LabError::Checkpoint(format!(
                "matrix {name:?} is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(())
    }
}

pub fn save_head<T: Scalar>(head: &DraftHead<T>) -> Checkpoint {
    let mut ck = Checkpoint::bare(head.kind().as_str(), head.vocab_size(), head.hidden_dim());
    match head {
        DraftHead::Full(_) => {}
        DraftHead::SlimSpec(h) => ck.r = Some(h.rank()),
        DraftHead::Truncated(h) => {
            ck.v_tr = Some(h.truncated_size());
            ck.index_map = Some(h.index_map.iter().map(|t| t.0).collect());
        }
        DraftHead::Routed(h) => {
            ck.r = Some(h.rank());
            ck.k = Some(h.k);
        }
    }
    for (name, m) in head.matrices() {
        ck.matrices.insert(name.to_string(), MatrixJson::from_matrix(m));
    }
    ck
}

pub fn load_head_as<T: Scalar>(ck: &Checkpoint) -> Result<DraftHead<T>> {
    let (v, d) = (ck.v, ck.d);
    Ok(match ck.kind.as_str() {
        "full" => {
            let w = ck.matrix("weight")?;
            ck.check_dims(&w, "weight", v, d)?;
            DraftHead::Full(FullHead::new(w)?)
        }
        "slimspec" => {
            let r = ck.require(ck.r, "r")?;
            let w_up = ck.matrix("w_up")?;
            let w_down = ck.matrix("w_down")?;
            ck.check_dims(&w_up, "w_up", v, r)?;
            ck.check_dims(&w_down, "w_down", r, d)?;
            DraftHead::SlimSpec(SlimSpecHead::new_allow_full_rank(w_up, w_down)?)
        }
        "truncated" => {
            let v_tr = ck.require(ck.v_tr, "v_tr")?;
            let index_map: Vec<TokenId> = ck
                .index_map
                .as_ref()
                .ok_or_else(|| LabError::Checkpoint("truncated checkpoint lacks index_map".into()))?
                .iter()
                .map(|&t| TokenId(t))
                .collect();
            if index_map.len() != v_tr {
                return Err(LabError::Checkpoint(format!(
                    "index_map has {} entries, v_tr is {v_tr}",
                    index_map.len()
                )));
            }
            let w = ck.matrix("weight")?;
            ck.check_dims(&w, "weight", v_tr, d)?;
            DraftHead::Truncated(TruncatedHead::new(w, index_map, v)?)
        }
        "routed" => {
            let r = ck.require(ck.r, "r")?;
            let k = ck.require(ck.k, "k")?;
            let down = ck.matrix("router_down")?;
            let up = ck.matrix("router_up")?;
            let w = ck.matrix("weight")?;
            ck.check_dims(&down, "router_down", r, d)?;
            ck.check_dims(&up, "router_up", v, r)?;
            ck.check_dims(&w, "weight", v, d)?;
            DraftHead::Routed(RoutedHead::new(down, up, w, k)?)
        }
        other => return Err(LabError::Checkpoint(format!("unknown head kind {other:?}"))),
    })
}

pub fn load_head(ck: &Checkpoint) -> Result<DraftHead> {
    load_head_as(ck)
}

pub fn save_target(model: &ToyTargetModel) -> Checkpoint {
    let mut ck = Checkpoint::bare("toy_target", model.vocab_size(), model.embed.cols());
    ck.d_h = Some(model.mlp_w1.rows());
    ck.c = Some(model.context_window);
    ck.logit_scale = Some(model.logit_scale);
    ck.seed = Some(model.seed);
    ck.matrices
        .insert("embed".into(), MatrixJson::from_matrix(&model.embed));
    ck.matrices
        .insert("mlp_w1".into(), MatrixJson::from_matrix(&model.mlp_w1));
    ck.matrices
        .insert("mlp_w2".into(), MatrixJson::from_matrix(&model.mlp_w2));
    ck
}

pub fn load_target(ck: &Checkpoint) -> Result<ToyTargetModel> {
    if ck.kind != "toy_target" {
        return Err(LabError::Checkpoint(format!("expected toy_target, got {:?}", ck.kind)));
    }
    let d_h = ck.require(ck.d_h, "d_h")?;
    let c = ck.require(ck.c, "c")?;
    let embed = ck.matrix("embed")?;
    let mlp_w1 = ck.matrix("mlp_w1")?;
    let mlp_w2 = ck.matrix("mlp_w2")?;
    ck.check_dims(&embed, "embed", ck.v, ck.d)?;
    ck.check_dims(&mlp_w1, "mlp_w1", d_h, ck.d)?;
    ck.check_dims(&mlp_w2, "mlp_w2", ck.v, d_h)?;
    Ok(ToyTargetModel {
        vocab: Vocabulary::new(ck.v)?,
        embed,
        mlp_w1,
        mlp_w2,
        context_window: c,
        logit_scale: ck.logit_scale.unwrap_or(1.0),
        seed: ck.seed.unwrap_or(0),
    })
}

pub fn save_backbone(backbone: &DrafterBackbone) -> Checkpoint {
    let mut ck = Checkpoint::bare("drafter_backbone", backbone.vocab_size(), backbone.hidden_dim());
    ck.c = Some(backbone.context_window);
    ck.seed = Some(backbone.seed);
    ck.matrices
        .insert("embed".into(), MatrixJson::from_matrix(&backbone.embed));
    ck.matrices.insert("mix".into(), MatrixJson::from_matrix(&backbone.mix));
    ck
}

pub fn load_backbone(ck: &Checkpoint) -> Result<DrafterBackbone> {
    if ck.kind != "drafter_backbone" {
        return Err(LabError::Checkpoint(format!(
            "expected drafter_backbone, got {:?}",
            ck.kind
        )));
    }
    let c = ck.require(ck.c, "c")?;
    let embed = ck.matrix("embed")?;
    ck.check_dims(&embed, "embed", ck.v, ck.d)?;
    DrafterBackbone::from_parts(embed, ck.matrix("mix")?, c, ck.seed.unwrap_or(0))
}
