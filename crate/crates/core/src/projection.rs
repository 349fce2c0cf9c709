//! Label-vector encoding and classical multidimensional scaling for the
//! comparison scatterplot.

use alloc::vec;
use alloc::vec::Vec;

use libm::{fabs, sqrt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AuditSession, Criterion, ImageId, LabelOutcome, LabelTable, PromptId};
use crate::rng::{rng_for, unit_f64, TAG_MDS_START};

pub const MAX_ITERATIONS: usize = 500;
pub const TOLERANCE: f64 = 1e-10;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), v);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    sqrt(dot(a, a))
}

/// One-hot label encoding: each criterion contributes its candidates plus
/// "absent" and "unknown" columns. Missing entries count as unknown.
pub fn encode_label_vectors(table: &LabelTable, criteria: &[Criterion], images: &[ImageId]) -> Matrix {
    let width: usize = criteria.iter().map(|c| c.candidates.len() + 2).sum();
    let mut m = Matrix::zeros(images.len(), width);
    for (r, image) in images.iter().enumerate() {
        let mut offset = 0;
        for criterion in criteria {
            let k = criterion.candidates.len();
            let slot = match table.get(image, &criterion.id) {
                Some(LabelOutcome::Label(i)) if i < k => i,
                Some(LabelOutcome::Absent) => k,
                _ => k + 1,
            };
            m.set(r, offset + slot, 1.0);
            offset += k + 2;
        }
    }
    m
}

/// Euclidean distances between rows.
pub fn pairwise_distances(m: &Matrix) -> Matrix {
    let n = m.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = sqrt(s);
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

/// Planar coordinates with their fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    pub stress: f64,
}

/// Double-centered Gram matrix `-1/2 J D² J`.
fn gram(d: &Matrix) -> Matrix {
    let n = d.rows();
    let mut sq = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = d.get(i, j);
            sq.set(i, j, v * v);
        }
    }
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).iter().sum::<f64>() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let mut b = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // D² is symmetric, so column means equal row means
            b.set(i, j, -0.5 * (sq.get(i, j) - row_means[i] - row_means[j] + grand));
        }
    }
    b
}

fn orthogonalize(v: &mut [f64], against: &[&[f64]]) {
    for u in against {
        let p = dot(v, u);
        for (x, y) in v.iter_mut().zip(*u) {
            *x -= p * y;
        }
    }
}

/// Dominant eigenpair of `b` restricted to the complement of `against`.
fn power_iteration(b: &Matrix, mut v: Vec<f64>, against: &[&[f64]]) -> (f64, Vec<f64>) {
    let n = v.len();
    orthogonalize(&mut v, against);
    let len = norm(&v);
    if len == 0.0 {
        return (0.0, v);
    }
    v.iter_mut().for_each(|x| *x /= len);
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERATIONS {
        b.mul_vec(&v, &mut w);
        orthogonalize(&mut w, against);
        lambda = dot(&v, &w);
        let len = norm(&w);
        if len < 1e-300 {
            return (0.0, v);
        }
        w.iter_mut().for_each(|x| *x /= len);
        let (mut same, mut flipped) = (0.0f64, 0.0f64);
        for (a, c) in w.iter().zip(&v) {
            same = same.max(fabs(a - c));
            flipped = flipped.max(fabs(a + c));
        }
        core::mem::swap(&mut v, &mut w);
        if same.min(flipped) < TOLERANCE {
            break;
        }
    }
    (lambda, v)
}

/// Eigen-decomposition of a symmetric 2×2 matrix, larger eigenvalue first.
fn sym2_eigen(a: f64, b: f64, c: f64) -> [(f64, [f64; 2]); 2] {
    let mean = 0.5 * (a + c);
    let half_gap = sqrt(0.25 * (a - c) * (a - c) + b * b);
    let (l1, l2) = (mean + half_gap, mean - half_gap);
    let v1 = if fabs(b) > 1e-300 {
        let (x, y) = (l1 - c, b);
        let len = sqrt(x * x + y * y);
        [x / len, y / len]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    [(l1, v1), (l2, [-v1[1], v1[0]])]
}

/// Top two eigenpairs of a symmetric matrix by power iteration with
/// deflation, refined by a Rayleigh-Ritz step on the pair's span.
fn top_two(b: &Matrix, seed: u64) -> [(f64, Vec<f64>); 2] {
    let n = b.rows();
    let mut rng = rng_for(seed, TAG_MDS_START);
    let mut start = || (0..n).map(|_| 2.0 * unit_f64(&mut rng) - 1.0).collect::<Vec<f64>>();
    let (s1, s2) = (start(), start());
    let (l1, v1) = power_iteration(b, s1, &[]);

    let mut deflated = b.clone();
    for i in 0..n {
        for j in 0..n {
            deflated.set(i, j, b.get(i, j) - l1 * v1[i] * v1[j]);
        }
    }
    let (l2, mut v2) = power_iteration(&deflated, s2, &[&v1]);
    orthogonalize(&mut v2, &[&v1]);
    let len2 = norm(&v2);
    if n < 2 || len2 < 1e-12 {
        return [(l1, v1), (0.0, vec![0.0; n])];
    }
    v2.iter_mut().for_each(|x| *x /= len2);

    let mut bv1 = vec![0.0; n];
    let mut bv2 = vec![0.0; n];
    b.mul_vec(&v1, &mut bv1);
    b.mul_vec(&v2, &mut bv2);
    let (t11, t12, t22) = (dot(&v1, &bv1), 0.5 * (dot(&v1, &bv2) + dot(&v2, &bv1)), dot(&v2, &bv2));
    if !(t11.is_finite() && t12.is_finite() && t22.is_finite()) {
        return [(l1, v1), (l2, v2)];
    }
    let rotate = |e: [f64; 2]| v1.iter().zip(&v2).map(|(a, c)| e[0] * a + e[1] * c).collect::<Vec<f64>>();
    let [(r1, e1), (r2, e2)] = sym2_eigen(t11, t12, t22);
    [(r1, rotate(e1)), (r2, rotate(e2))]
}

/// Classical (Torgerson) MDS into the plane.
pub fn classical_mds(d: &Matrix, seed: u64) -> Result<Embedding> {
    let n = d.rows();
    if n == 0 || d.cols() != n {
        return Err(Error::DegenerateInput("distance matrix must be square and non-empty"));
    }
    if d.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite distance"));
    }
    let b = gram(d);
    let pairs = top_two(&b, seed);
    let mut coords = vec![[0.0f64; 2]; n];
    for (axis, (lambda, v)) in pairs.iter().enumerate() {
        let scale = sqrt(lambda.max(0.0));
        // canonical orientation: first point non-negative
        let sign = if v[0] < 0.0 { -1.0 } else { 1.0 };
        for (c, x) in coords.iter_mut().zip(v) {
            c[axis] = sign * x * scale;
        }
    }
    let stress = stress(d, &coords);
    Ok(Embedding { coords, stress })
}

fn planar(a: [f64; 2], b: [f64; 2]) -> f64 {
    sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]))
}

/// `sqrt(Σ(d_ij − d̂_ij)² / Σ d_ij²)` over pairs; zero when all distances are zero.
pub fn stress(d: &Matrix, coords: &[[f64; 2]]) -> f64 {
    let (mut residual, mut total) = (0.0, 0.0);
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            let dij = d.get(i, j);
            let fit = planar(coords[i], coords[j]);
            residual += (dij - fit) * (dij - fit);
            total += dij * dij;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        sqrt(residual / total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub image_id: ImageId,
    pub prompt_id: PromptId,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterData {
    pub points: Vec<ScatterPoint>,
    pub stress: f64,
    pub encoding_dims: usize,
}

/// Projects every labeled image of the selected prompts into the plane.
pub fn project(session: &AuditSession) -> Result<ScatterData> {
    let labeled: Vec<(&ImageId, &PromptId)> = session
        .images
        .iter()
        .filter(|img| session.selected_prompt_ids.contains(&img.prompt_id))
        .filter(|img| session.criteria.iter().any(|c| session.label_table.contains(&img.id, &c.id)))
        .map(|img| (&img.id, &img.prompt_id))
        .collect();
    if labeled.is_empty() {
        return Err(Error::NoLabeledImages);
    }
    let ids: Vec<ImageId> = labeled.iter().map(|(i, _)| (*i).clone()).collect();
    let vectors = encode_label_vectors(&session.label_table, &session.criteria, &ids);
    let distances = pairwise_distances(&vectors);
    let embedding = classical_mds(&distances, session.seed)?;
    let points = labeled
        .iter()
        .zip(&embedding.coords)
        .map(|((image_id, prompt_id), c)| ScatterPoint {
            image_id: (*image_id).clone(),
            prompt_id: (*prompt_id).clone(),
            x: c[0],
            y: c[1],
        })
        .collect();
    Ok(ScatterData {
        points,
        stress: embedding.stress,
        encoding_dims: vectors.cols(),
    })
}
