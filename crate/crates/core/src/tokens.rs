//! Multimodal token sequence layout and the modality-isolation attention mask.
//!
//! Each timestep contributes `[img, text.., simg×8, gimg×8, occ×8, act]`.
//! Read-out groups never see each other, so any optional group can be dropped
//! at inference without changing what the remaining tokens compute.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

/// Tokens per static-image, wrist-image and occupancy read-out group.
pub const READOUT_GROUP_LEN: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum TokenError {
    #[error("at least one timestep is required")]
    NoTimesteps,
    #[error("the action read-out cannot be disabled")]
    ActionDisabled,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask text: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenKind {
    Img,
    Text,
    StaticImage,
    WristImage,
    Occupancy,
    Action,
}

impl TokenKind {
    pub fn is_readout(self) -> bool {
        !matches!(self, TokenKind::Img | TokenKind::Text)
    }

    pub fn label(self) -> &'static str {
        match self {
            TokenKind::Img => "img",
            TokenKind::Text => "text",
            TokenKind::StaticImage => "simg",
            TokenKind::WristImage => "gimg",
            TokenKind::Occupancy => "occ",
            TokenKind::Action => "act",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s {
            "img" => TokenKind::Img,
            "text" => TokenKind::Text,
            "simg" => TokenKind::StaticImage,
            "gimg" => TokenKind::WristImage,
            "occ" => TokenKind::Occupancy,
            "act" => TokenKind::Action,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub step: usize,
    pub kind: TokenKind,
    /// Absolute index in the full canonical layout; survives subsetting.
    pub position_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    tokens: Vec<Token>,
}

impl TokenLayout {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Indices (in this layout) of tokens of `kind` at `step`.
    pub fn span(&self, step: usize, kind: TokenKind) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.step == step && t.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn position_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.position_id).collect()
    }
}

/// Canonical layout for `text_lens.len()` timesteps.
pub fn build_layout(text_lens: &[usize]) -> Result<TokenLayout, TokenError> {
    if text_lens.is_empty() {
        return Err(TokenError::NoTimesteps);
    }
    let mut tokens = Vec::with_capacity(expected_len(text_lens));
    let mut push = |step, kind, n| {
        for _ in 0..n {
            let position_id = tokens.len();
            tokens.push(Token {
                step,
                kind,
                position_id,
            });
        }
    };
    for (step, &len) in text_lens.iter().enumerate() {
        push(step, TokenKind::Img, 1);
        push(step, TokenKind::Text, len);
        push(step, TokenKind::StaticImage, READOUT_GROUP_LEN);
        push(step, TokenKind::WristImage, READOUT_GROUP_LEN);
        push(step, TokenKind::Occupancy, READOUT_GROUP_LEN);
        push(step, TokenKind::Action, 1);
    }
    Ok(TokenLayout { tokens })
}

/// `Σ_h (1 + L_h + 3·8 + 1)`.
pub fn expected_len(text_lens: &[usize]) -> usize {
    text_lens
        .iter()
        .map(|l| 1 + l + 3 * READOUT_GROUP_LEN + 1)
        .sum()
}

/// Square boolean mask; `allowed(q, k)` means query `q` may attend key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MimMask {
    n: usize,
    cells: Vec<bool>,
}

impl MimMask {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.cells[query * self.n + key]
    }

    pub fn allowed_keys(&self, query: usize) -> Vec<usize> {
        (0..self.n).filter(|&k| self.allowed(query, k)).collect()
    }

    /// Rows and columns restricted to `keep` (indices into this mask).
    pub fn select(&self, keep: &[usize]) -> MimMask {
        let n = keep.len();
        let mut cells = Vec::with_capacity(n * n);
        for &q in keep {
            for &k in keep {
                cells.push(self.allowed(q, k));
            }
        }
        MimMask { n, cells }
    }
}

/// Attention rule between two tokens of the same layout.
///
/// Context tokens (img/text) attend causally to context tokens. A read-out
/// token at step `h` attends to context tokens of steps `≤ h` and causally to
/// tokens of its own read-out modality. Nothing attends to a read-out token of
/// another modality, and context tokens never attend to read-outs.
pub fn attends(query: &Token, key: &Token) -> bool {
    match (query.kind.is_readout(), key.kind.is_readout()) {
        (false, false) => key.position_id <= query.position_id,
        (false, true) => false,
        (true, false) => key.step <= query.step,
        (true, true) => key.kind == query.kind && key.position_id <= query.position_id,
    }
}

pub fn build_mask(layout: &TokenLayout) -> MimMask {
    let n = layout.len();
    let mut cells = Vec::with_capacity(n * n);
    for q in &layout.tokens {
        for k in &layout.tokens {
            cells.push(attends(q, k));
        }
    }
    MimMask { n, cells }
}

/// Optional read-out groups kept at inference. Actions are always kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalitySubset {
    pub static_image: bool,
    pub wrist_image: bool,
    pub occupancy: bool,
}

impl Default for ModalitySubset {
    fn default() -> Self {
        Self::ALL
    }
}

impl ModalitySubset {
    pub const ALL: ModalitySubset = ModalitySubset {
        static_image: true,
        wrist_image: true,
        occupancy: true,
    };
    pub const ACTION_ONLY: ModalitySubset = ModalitySubset {
        static_image: false,
        wrist_image: false,
        occupancy: false,
    };

    /// Parses a comma-separated list of groups to disable (`simg,gimg,occ`).
    pub fn disabling(labels: &str) -> Result<Self, TokenError> {
        let mut s = Self::ALL;
        for label in labels.split(',').map(str::trim).filter(|l| !l.is_empty()) {
            match TokenKind::from_label(label) {
                Some(TokenKind::StaticImage) => s.static_image = false,
                Some(TokenKind::WristImage) => s.wrist_image = false,
                Some(TokenKind::Occupancy) => s.occupancy = false,
                Some(TokenKind::Action) => return Err(TokenError::ActionDisabled),
                _ => {
                    return Err(TokenError::Parse(format!(
                        "unknown read-out group {label:?} (expected simg, gimg or occ)"
                    )))
                }
            }
        }
        Ok(s)
    }

    pub fn keeps(&self, kind: TokenKind) -> bool {
        match kind {
            TokenKind::StaticImage => self.static_image,
            TokenKind::WristImage => self.wrist_image,
            TokenKind::Occupancy => self.occupancy,
            _ => true,
        }
    }
}

/// Indices (into `layout`) of the tokens surviving `subset`.
pub fn kept_indices(layout: &TokenLayout, subset: &ModalitySubset) -> Vec<usize> {
    layout
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| subset.keeps(t.kind))
        .map(|(i, _)| i)
        .collect()
}

pub fn subset_layout(layout: &TokenLayout, subset: &ModalitySubset) -> (TokenLayout, MimMask) {
    let sub = TokenLayout {
        tokens: kept_indices(layout, subset)
            .into_iter()
            .map(|i| layout.tokens[i])
            .collect(),
    };
    let mask = build_mask(&sub);
    (sub, mask)
}

/// Single-head masked scaled dot-product attention.
///
/// Row `i` is the softmax over allowed keys of `Q_i·K_j / √d`, applied to `V`.
/// Masked keys are skipped outright, so they contribute exactly zero.
pub fn masked_attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mask: &MimMask,
) -> Result<DMatrix<f64>, TokenError> {
    let n = mask.size();
    if q.nrows() != n || k.nrows() != n || v.nrows() != n {
        return Err(TokenError::Shape(format!(
            "mask is {n}x{n} but Q/K/V have {}/{}/{} rows",
            q.nrows(),
            k.nrows(),
            v.nrows()
        )));
    }
    if q.ncols() != k.ncols() {
        return Err(TokenError::Shape(format!(
            "Q has {} columns, K has {}",
            q.ncols(),
            k.ncols()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut out = DMatrix::zeros(n, v.ncols());
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        scores.clear();
        for j in 0..n {
            if mask.allowed(i, j) {
                let s: f64 = (0..q.ncols()).map(|c| q[(i, c)] * k[(j, c)]).sum();
                scores.push((j, s * scale));
            }
        }
        if scores.is_empty() {
            return Err(TokenError::Shape(format!("row {i} has no allowed keys")));
        }
        let max = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (_, s) in scores.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        for &(j, w) in &scores {
            let w = w / denom;
            for c in 0..v.ncols() {
                out[(i, c)] += w * v[(j, c)];
            }
        }
    }
    Ok(out)
}

/// Portable text dump of a layout and its mask.
///
/// ```text
/// layout <n>
/// <index> <position_id> <step> <kind>
/// ...
/// mask <n> <n>
/// <row of n 0/1 characters>
/// ...
/// ```
pub fn dump_text(layout: &TokenLayout, mask: &MimMask) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "layout {}", layout.len());
    for (i, t) in layout.tokens.iter().enumerate() {
        let _ = writeln!(s, "{i} {} {} {}", t.position_id, t.step, t.kind.label());
    }
    let _ = writeln!(s, "mask {} {}", mask.n, mask.n);
    for q in 0..mask.n {
        for k in 0..mask.n {
            s.push(if mask.allowed(q, k) { '1' } else { '0' });
        }
        s.push('\n');
    }
    s
}

pub fn parse_text(text: &str) -> Result<(TokenLayout, MimMask), TokenError> {
    let bad = |m: String| TokenError::Parse(m);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty input".into()))?;
    let n: usize = header
        .strip_prefix("layout ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| bad(format!("bad layout header {header:?}")))?;
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let line = lines.next().ok_or_else(|| bad(format!("missing token line {i}")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        let parsed = (f.len() == 4)
            .then(|| {
                Some(Token {
                    position_id: f[1].parse().ok()?,
                    step: f[2].parse().ok()?,
                    kind: TokenKind::from_label(f[3])?,
                })
            })
            .flatten();
        tokens.push(parsed.ok_or_else(|| bad(format!("bad token line {line:?}")))?);
    }
    let header = lines.next().ok_or_else(|| bad("missing mask header".into()))?;
    if header.trim() != format!("mask {n} {n}") {
        return Err(bad(format!("bad mask header {header:?}")));
    }
    let mut cells = Vec::with_capacity(n * n);
    for q in 0..n {
        let row = lines.next().ok_or_else(|| bad(format!("missing mask row {q}")))?;
        if row.len() != n {
            return Err(bad(format!("mask row {q} has {} entries", row.len())));
        }
        for ch in row.chars() {
            cells.push(match ch {
                '1' => true,
                '0' => false,
                _ => return Err(bad(format!("mask row {q}: unexpected {ch:?}"))),
            });
        }
    }
    Ok((TokenLayout { tokens }, MimMask { n, cells }))
}
