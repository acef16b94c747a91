//! Assembly of the sparse point-match system and its regularized normal
//! equations.
//!
//! Each point pair `(p, q)` between tiles `P` and `Q` contributes two rows to
//! `A`: a `u` row holding `+basis(p)` in the `u` columns of `P` and
//! `-basis(q)` in the `u` columns of `Q`, and the matching `v` row. Rows are
//! grouped per tile pair, all `u` rows of a pair first, then all its `v` rows.
//! With `x` the packed coefficients of all tiles, `A·x - b` is the vector of
//! per-coordinate point-match residuals.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fill_basis, ModelKind, Point2, TileSpec, TransformParams};
use crate::sparse::CsrMatrix;

/// Tile-id keyed transforms, ordered by tile id.
pub type Solution = BTreeMap<String, TransformParams>;

/// Point correspondences between one pair of tiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub p_tile: String,
    pub q_tile: String,
    pub p: Vec<Point2>,
    pub q: Vec<Point2>,
    #[serde(default)]
    pub w: Vec<f64>,
}

impl MatchSet {
    /// Creates a match set; `w` defaults to all ones.
    pub fn new(
        p_tile: impl Into<String>,
        q_tile: impl Into<String>,
        p: Vec<Point2>,
        q: Vec<Point2>,
        w: Option<Vec<f64>>,
    ) -> Result<Self> {
        let w = w.unwrap_or_else(|| vec![1.0; p.len()]);
        let set = Self {
            p_tile: p_tile.into(),
            q_tile: q_tile.into(),
            p,
            q,
            w,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Fills omitted weights with ones, then checks the invariants.
    pub(crate) fn normalize(&mut self) -> Result<()> {
        if self.w.is_empty() {
            self.w = vec![1.0; self.p.len()];
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.p.len();
        if n == 0 {
            return Err(Error::InvalidInput(format!(
                "match set {}-{} has no points",
                self.p_tile, self.q_tile
            )));
        }
        if self.q.len() != n || self.w.len() != n {
            return Err(Error::InvalidInput(format!(
                "match set {}-{}: p, q, w lengths differ ({}, {}, {})",
                self.p_tile,
                self.q_tile,
                n,
                self.q.len(),
                self.w.len()
            )));
        }
        if self.p_tile == self.q_tile {
            return Err(Error::InvalidInput(format!("match set pairs tile `{}` with itself", self.p_tile)));
        }
        if self.w.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "match set {}-{} has a negative or non-finite weight",
                self.p_tile, self.q_tile
            )));
        }
        if self.p.iter().chain(&self.q).any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "match set {}-{} has a non-finite point",
                self.p_tile, self.q_tile
            )));
        }
        Ok(())
    }

    /// The same correspondences seen from the other tile.
    pub fn reversed(&self) -> MatchSet {
        MatchSet {
            p_tile: self.q_tile.clone(),
            q_tile: self.p_tile.clone(),
            p: self.q.clone(),
            q: self.p.clone(),
            w: self.w.clone(),
        }
    }

    fn unordered_key(&self) -> (String, String) {
        if self.p_tile <= self.q_tile {
            (self.p_tile.clone(), self.q_tile.clone())
        } else {
            (self.q_tile.clone(), self.p_tile.clone())
        }
    }
}

/// Merges match sets naming the same unordered tile pair by concatenating
/// their points, keeping the orientation and position of the first one.
pub fn merge_duplicates(matches: &[MatchSet]) -> Vec<MatchSet> {
    let mut slot: HashMap<(String, String), usize> = HashMap::new();
    let mut out: Vec<MatchSet> = Vec::with_capacity(matches.len());
    for m in matches {
        match slot.get(&m.unordered_key()) {
            Some(&k) => {
                let target = &mut out[k];
                let m = if target.p_tile == m.p_tile { m.clone() } else { m.reversed() };
                target.p.extend(m.p);
                target.q.extend(m.q);
                target.w.extend(m.w);
            }
            None => {
                slot.insert(m.unordered_key(), out.len());
                out.push(m.clone());
            }
        }
    }
    out
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Keeps `max` points of `m`, chosen by a stable hash of the pair ids and the
/// point index; the kept points stay in their original order.
pub fn subsample(m: &MatchSet, max: usize) -> MatchSet {
    if m.len() <= max {
        return m.clone();
    }
    let (a, b) = m.unordered_key();
    let seed = fnv1a(
        a.bytes().chain([0u8]).chain(b.bytes()).chain([0u8]),
        0xcbf2_9ce4_8422_2325,
    );
    let mut keyed: Vec<(u64, usize)> = (0..m.len())
        .map(|i| (fnv1a((i as u64).to_le_bytes(), seed), i))
        .collect();
    keyed.sort_unstable();
    let mut keep: Vec<usize> = keyed[..max].iter().map(|&(_, i)| i).collect();
    keep.sort_unstable();
    MatchSet {
        p_tile: m.p_tile.clone(),
        q_tile: m.q_tile.clone(),
        p: keep.iter().map(|&i| m.p[i]).collect(),
        q: keep.iter().map(|&i| m.q[i]).collect(),
        w: keep.iter().map(|&i| m.w[i]).collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConnectivityReport {
    /// Connected components of non-orphan tiles, each sorted, largest first.
    pub components: Vec<Vec<String>>,
    /// Tiles without any point-match.
    pub orphans: Vec<String>,
    /// Point-match count per unordered tile pair.
    pub pair_counts: BTreeMap<(String, String), usize>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

pub fn validate_connectivity(tiles: &[TileSpec], matches: &[MatchSet]) -> Result<ConnectivityReport> {
    let mut ids: Vec<&str> = tiles.iter().map(|t| t.tile_id.as_str()).collect();
    ids.sort_unstable();
    let index = |id: &str| ids.binary_search(&id).map_err(|_| Error::UnknownTile(id.to_string()));

    let mut parent: Vec<usize> = (0..ids.len()).collect();
    let mut touched = vec![false; ids.len()];
    let mut pair_counts = BTreeMap::new();
    for m in matches {
        let (a, b) = (index(&m.p_tile)?, index(&m.q_tile)?);
        touched[a] = true;
        touched[b] = true;
        *pair_counts.entry(m.unordered_key()).or_insert(0) += m.len();
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }

    let orphans: Vec<String> = ids
        .iter()
        .zip(&touched)
        .filter(|(_, t)| !**t)
        .map(|(id, _)| id.to_string())
        .collect();
    if orphans.len() == ids.len() {
        return Err(Error::NoConnectedTiles);
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if touched[i] {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(id.to_string());
        }
    }
    let mut components: Vec<Vec<String>> = groups.into_values().collect();
    components.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    Ok(ConnectivityReport {
        components,
        orphans,
        pair_counts,
    })
}

/// Row span of one tile pair inside a [`SparseSystem`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRows {
    /// Index of the `p` tile in `SparseSystem::tiles`.
    pub p: usize,
    /// Index of the `q` tile in `SparseSystem::tiles`.
    pub q: usize,
    pub row_start: usize,
    pub row_count: usize,
}

/// The weighted point-match system `D^(1/2)(A·x - b)` over a set of tiles.
#[derive(Clone, Debug)]
pub struct SparseSystem {
    pub kind: ModelKind,
    /// Tiles in ascending `tile_id` order; tile `i` owns block `columns[i]`.
    pub tiles: Vec<TileSpec>,
    pub a: CsrMatrix,
    /// Per-row weights (the diagonal of `D`).
    pub d: Vec<f64>,
    pub b: Vec<f64>,
    /// Match sets as assembled (merged, filtered, subsampled, canonical order).
    pub matches: Vec<MatchSet>,
    pub pairs: Vec<PairRows>,
    /// Column block of each tile, `None` when the tile is fixed.
    pub columns: Vec<Option<usize>>,
    /// Fixed transform of each tile, `Some` exactly when `columns` is `None`.
    pub fixed: Vec<Option<TransformParams>>,
}

impl SparseSystem {
    /// A system with tiles but no point-match rows; only a prior can
    /// determine its solution.
    pub fn prior_only(tiles: &[TileSpec], kind: ModelKind) -> Result<Self> {
        let mut tiles = tiles.to_vec();
        tiles.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
        if tiles.windows(2).any(|w| w[0].tile_id == w[1].tile_id) {
            return Err(Error::InvalidInput("duplicate tile_id".into()));
        }
        let n = tiles.len();
        Ok(Self {
            kind,
            a: CsrMatrix::from_rows(n * kind.coeffs_per_tile(), Vec::new()),
            d: Vec::new(),
            b: Vec::new(),
            matches: Vec::new(),
            pairs: Vec::new(),
            columns: (0..n).map(Some).collect(),
            fixed: vec![None; n],
            tiles,
        })
    }

    pub fn n_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn n_free(&self) -> usize {
        self.columns.iter().filter(|c| c.is_some()).count()
    }

    pub fn coeffs_per_tile(&self) -> usize {
        self.kind.coeffs_per_tile()
    }

    /// Number of unknowns.
    pub fn ncols(&self) -> usize {
        self.a.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.a.nrows()
    }

    pub fn nnz(&self) -> usize {
        self.a.nnz()
    }

    pub fn point_match_count(&self) -> usize {
        self.matches.iter().map(MatchSet::len).sum()
    }

    pub fn tile_index(&self, tile_id: &str) -> Option<usize> {
        self.tiles.binary_search_by(|t| t.tile_id.as_str().cmp(tile_id)).ok()
    }

    /// Indices of tiles that own columns, in column order.
    pub fn free_tiles(&self) -> impl Iterator<Item = usize> + '_ {
        self.columns.iter().enumerate().filter_map(|(i, c)| c.map(|_| i))
    }

    /// Restricts a per-tile packed vector (length `n_tiles·n_c`) to the
    /// columns of free tiles.
    pub fn free_vector(&self, full: &[f64]) -> Vec<f64> {
        let nc = self.coeffs_per_tile();
        assert_eq!(full.len(), self.n_tiles() * nc);
        self.free_tiles()
            .flat_map(|i| full[i * nc..(i + 1) * nc].iter().copied())
            .collect()
    }

    /// Transforms of all tiles (free ones read from `x`, fixed ones as fixed).
    pub fn unpack(&self, x: &[f64]) -> Solution {
        assert_eq!(x.len(), self.ncols(), "solution length does not match system");
        let nc = self.coeffs_per_tile();
        self.tiles
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let params = match (self.columns[i], &self.fixed[i]) {
                    (Some(c), _) => TransformParams {
                        kind: self.kind,
                        coeffs: x[c * nc..(c + 1) * nc].to_vec(),
                    },
                    (None, Some(f)) => f.clone(),
                    (None, None) => unreachable!("tile without columns must be fixed"),
                };
                (t.tile_id.clone(), params)
            })
            .collect()
    }

    /// Packs the free tiles of `solution` into a column vector.
    pub fn pack(&self, solution: &Solution) -> Result<Vec<f64>> {
        let nc = self.coeffs_per_tile();
        let mut x = vec![0.0; self.ncols()];
        for i in self.free_tiles() {
            let id = &self.tiles[i].tile_id;
            let t = solution.get(id).ok_or_else(|| Error::UnknownTile(id.clone()))?;
            let t = t.convert_to(self.kind);
            let c = self.columns[i].unwrap();
            x[c * nc..(c + 1) * nc].copy_from_slice(&t.coeffs);
        }
        Ok(x)
    }

    /// `A·x - b`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.a.matvec(x);
        r.iter_mut().zip(&self.b).for_each(|(ri, bi)| *ri -= bi);
        r
    }
}

/// Filtering applied to match sets before assembly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchFilter {
    /// Pairs with fewer points are dropped.
    pub min_matches: usize,
    /// Pairs with more points are deterministically subsampled.
    pub max_matches: usize,
}

impl Default for MatchFilter {
    fn default() -> Self {
        Self {
            min_matches: 1,
            max_matches: usize::MAX,
        }
    }
}

pub(crate) type IndexedPair = (usize, usize, MatchSet);

/// Merges, filters and subsamples `matches`, then orders tiles by id and
/// pairs canonically. Returns the surviving tiles and pairs (as tile indices).
pub(crate) fn prepare_pairs(tiles: &[TileSpec], matches: &[MatchSet], filter: MatchFilter) -> Result<(Vec<TileSpec>, Vec<IndexedPair>)> {
    let merged = merge_duplicates(matches);
    let mut kept = Vec::with_capacity(merged.len());
    for m in merged {
        m.validate()?;
        if m.len() < filter.min_matches {
            warn!(
                "dropping pair {}-{}: {} matches < minimum {}",
                m.p_tile,
                m.q_tile,
                m.len(),
                filter.min_matches
            );
            continue;
        }
        kept.push(subsample(&m, filter.max_matches));
    }
    if kept.is_empty() {
        return Err(Error::EmptySystem);
    }

    let report = validate_connectivity(tiles, &kept)?;
    if report.components.len() > 1 {
        return Err(Error::Disconnected {
            components: report.components.len(),
        });
    }
    if !report.orphans.is_empty() {
        warn!("excluding {} orphan tiles without matches", report.orphans.len());
    }
    let mut used: Vec<TileSpec> = tiles
        .iter()
        .filter(|t| report.orphans.binary_search(&t.tile_id).is_err())
        .cloned()
        .collect();
    used.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
    if used.windows(2).any(|w| w[0].tile_id == w[1].tile_id) {
        return Err(Error::InvalidInput("duplicate tile_id".into()));
    }
    let index = |id: &str| used.binary_search_by(|t| t.tile_id.as_str().cmp(id)).unwrap();
    let mut pairs: Vec<IndexedPair> = kept
        .into_iter()
        .map(|m| (index(&m.p_tile), index(&m.q_tile), m))
        .collect();
    pairs.sort_by_key(|(p, q, _)| (*p.min(q), *p.max(q)));
    Ok((used, pairs))
}

/// Row entries of one pair, written as four column groups per row.
struct PairBlock {
    indices: Vec<usize>,
    data: Vec<f64>,
    b: Vec<f64>,
    d: Vec<f64>,
}

/// Emits the `u` and `v` rows of one pair for a model with basis length `nb`.
///
/// `extra` optionally supplies extra point sets (the rotated copies used by
/// the similarity system); each set adds `n` more rows per coordinate.
fn pair_rows(
    kind: ModelKind,
    off_p: usize,
    off_q: usize,
    sets: &[(&[Point2], &[Point2])],
    w: &[f64],
) -> PairBlock {
    let nb = kind.basis_len();
    let n = w.len();
    let rows = 2 * n * sets.len();
    let mut block = PairBlock {
        indices: Vec::with_capacity(rows * 2 * nb),
        data: Vec::with_capacity(rows * 2 * nb),
        b: Vec::with_capacity(rows),
        d: Vec::with_capacity(rows),
    };
    let mut bp = [0.0; 10];
    let mut bq = [0.0; 10];
    for coord in 0..2 {
        let shift = coord * nb;
        for (ps, qs) in sets {
            for i in 0..n {
                fill_basis(kind, ps[i], &mut bp);
                fill_basis(kind, qs[i], &mut bq);
                let p_entries = (0..nb).map(|k| (off_p + shift + k, bp[k]));
                let q_entries = (0..nb).map(|k| (off_q + shift + k, -bq[k]));
                if off_p < off_q {
                    p_entries.chain(q_entries).for_each(|(c, v)| {
                        block.indices.push(c);
                        block.data.push(v);
                    });
                } else {
                    q_entries.chain(p_entries).for_each(|(c, v)| {
                        block.indices.push(c);
                        block.data.push(v);
                    });
                }
                let rhs = if kind.has_implicit_identity() {
                    let (p, q) = (ps[i], qs[i]);
                    if coord == 0 {
                        q.x - p.x
                    } else {
                        q.y - p.y
                    }
                } else {
                    0.0
                };
                block.b.push(rhs);
                block.d.push(w[i]);
            }
        }
    }
    block
}

/// Concatenates per-pair row blocks (each row holding `2·nb` entries) into a
/// system over `tiles`.
fn assemble(
    kind: ModelKind,
    tiles: Vec<TileSpec>,
    pairs: Vec<IndexedPair>,
    rows_per_point: usize,
    emit: impl Fn(usize, usize, &MatchSet) -> PairBlock + Sync,
) -> SparseSystem {
    let nc = kind.coeffs_per_tile();
    let blocks: Vec<PairBlock> = pairs
        .par_iter()
        .map(|(p, q, m)| emit(p * nc, q * nc, m))
        .collect();

    let nrows: usize = blocks.iter().map(|b| b.b.len()).sum();
    let nnz: usize = blocks.iter().map(|b| b.data.len()).sum();
    let mut indices = Vec::with_capacity(nnz);
    let mut data = Vec::with_capacity(nnz);
    let mut b = Vec::with_capacity(nrows);
    let mut d = Vec::with_capacity(nrows);
    let mut rows = Vec::with_capacity(pairs.len());
    for ((p, q, m), blk) in pairs.iter().zip(blocks) {
        debug_assert_eq!(blk.b.len(), rows_per_point * m.len());
        rows.push(PairRows {
            p: *p,
            q: *q,
            row_start: b.len(),
            row_count: blk.b.len(),
        });
        indices.extend(blk.indices);
        data.extend(blk.data);
        b.extend(blk.b);
        d.extend(blk.d);
    }
    let width = 2 * kind.basis_len();
    let indptr: Vec<usize> = (0..=nrows).map(|r| r * width).collect();
    let n = tiles.len();
    let a = CsrMatrix::new(nrows, n * nc, indptr, indices, data).expect("assembled rows are well formed");
    SparseSystem {
        kind,
        a,
        d,
        b,
        matches: pairs.into_iter().map(|(_, _, m)| m).collect(),
        pairs: rows,
        columns: (0..n).map(Some).collect(),
        fixed: vec![None; n],
        tiles,
    }
}

/// Assembles `A`, `D` and `b` for `kind` from the given tiles and matches.
///
/// Orphan tiles are excluded; no tile is fixed. `b` is zero except for the
/// translation model, whose implicit identity moves `q - p` to the right-hand
/// side.
pub fn build_system(
    tiles: &[TileSpec],
    matches: &[MatchSet],
    kind: ModelKind,
    filter: MatchFilter,
) -> Result<SparseSystem> {
    let (tiles, pairs) = prepare_pairs(tiles, matches, filter)?;
    Ok(assemble(kind, tiles, pairs, 2, |off_p, off_q, m| {
        pair_rows(kind, off_p, off_q, &[(&m.p, &m.q)], &m.w)
    }))
}

/// Similarity-augmented system over tile-centered matches: for every point,
/// rows for `(x, y)` followed by rows for the rotated point `(y, -x)`, in both
/// the `u` and `v` groups.
pub(crate) fn build_augmented_system(tiles: Vec<TileSpec>, pairs: Vec<IndexedPair>) -> SparseSystem {
    let kind = ModelKind::RigidApprox;
    let rot = |pts: &[Point2]| -> Vec<Point2> { pts.iter().map(|p| Point2::new(p.y, -p.x)).collect() };
    assemble(kind, tiles, pairs, 4, |off_p, off_q, m| {
        let (rp, rq) = (rot(&m.p), rot(&m.q));
        pair_rows(kind, off_p, off_q, &[(&m.p, &m.q), (&rp, &rq)], &m.w)
    })
}

/// Eliminates the columns of the given tiles, moving their contribution to
/// `b` so that `A·x - b` is unchanged for the remaining tiles.
pub fn fix_tiles(system: &SparseSystem, fixed: &BTreeMap<String, TransformParams>) -> Result<SparseSystem> {
    if fixed.is_empty() {
        return Ok(system.clone());
    }
    let nc = system.coeffs_per_tile();
    let mut out = system.clone();
    for (id, t) in fixed {
        let i = system.tile_index(id).ok_or_else(|| Error::UnknownTile(id.clone()))?;
        if t.kind != system.kind || t.coeffs.len() != nc {
            return Err(Error::InvalidInput(format!(
                "fixed transform for `{id}` is {} but the system is {}",
                t.kind, system.kind
            )));
        }
        out.columns[i] = None;
        out.fixed[i] = Some(t.clone());
    }
    if out.columns.iter().all(Option::is_none) {
        return Err(Error::AllTilesFixed);
    }

    // old column block -> tile, and tile -> new column block
    let mut block_tile = vec![0; system.n_free()];
    for (i, c) in system.columns.iter().enumerate() {
        if let Some(c) = c {
            block_tile[*c] = i;
        }
    }
    let mut next = 0;
    for c in out.columns.iter_mut().flatten() {
        *c = next;
        next += 1;
    }

    let mut rows = Vec::with_capacity(system.nrows());
    for r in 0..system.nrows() {
        let (cols, vals) = system.a.row(r);
        let mut row = Vec::with_capacity(cols.len());
        for (&c, &v) in cols.iter().zip(vals) {
            let tile = block_tile[c / nc];
            let local = c % nc;
            match out.columns[tile] {
                Some(nb) => row.push((nb * nc + local, v)),
                None => out.b[r] -= v * out.fixed[tile].as_ref().unwrap().coeffs[local],
            }
        }
        rows.push(row);
    }
    out.a = CsrMatrix::from_rows(next * nc, rows);
    Ok(out)
}

/// The regularized normal equations `Ã·x = b̃`.
#[derive(Clone, Debug)]
pub struct NormalSystem {
    pub a_tilde: CsrMatrix,
    pub b_tilde: Vec<f64>,
    /// Coefficients per tile; the matrix is block-structured with this size.
    pub block_size: usize,
}

impl NormalSystem {
    pub fn n(&self) -> usize {
        self.b_tilde.len()
    }
}

/// `Aᵀ·D·A` and `Aᵀ·D·b`, reusable across regularization weights.
#[derive(Clone, Debug)]
pub struct GramSystem {
    pub ata: CsrMatrix,
    pub atb: Vec<f64>,
    pub block_size: usize,
    diag_pos: Vec<usize>,
    /// Column sets that move every free tile by the same translation.
    gauge: Vec<Vec<usize>>,
    labels: Vec<String>,
}

/// Computes the weighted Gram matrix of `system` block by block, in row order.
pub fn gram(system: &SparseSystem) -> GramSystem {
    let bs = system.coeffs_per_tile();
    let n = system.ncols();
    let nblocks = n / bs;
    let mut slot: HashMap<(usize, usize), usize> = HashMap::new();
    let mut store: Vec<f64> = Vec::new();
    let mut get = |bi: usize, bj: usize, store: &mut Vec<f64>| -> usize {
        *slot.entry((bi, bj)).or_insert_with(|| {
            store.extend(std::iter::repeat_n(0.0, bs * bs));
            store.len() - bs * bs
        })
    };
    for b in 0..nblocks {
        get(b, b, &mut store);
    }

    let mut atb = vec![0.0; n];
    let mut groups: Vec<(usize, usize, usize)> = Vec::with_capacity(4);
    for r in 0..system.nrows() {
        let (cols, vals) = system.a.row(r);
        let w = system.d[r];
        if cols.is_empty() {
            continue;
        }
        for (&c, &v) in cols.iter().zip(vals) {
            atb[c] += v * w * system.b[r];
        }
        // contiguous runs of entries in the same block
        groups.clear();
        let mut start = 0;
        for k in 1..=cols.len() {
            if k == cols.len() || cols[k] / bs != cols[start] / bs {
                groups.push((cols[start] / bs, start, k));
                start = k;
            }
        }
        for &(bi, si, ei) in &groups {
            for &(bj, sj, ej) in &groups {
                let base = get(bi, bj, &mut store);
                for e1 in si..ei {
                    let wv = w * vals[e1];
                    let row = base + (cols[e1] % bs) * bs;
                    for e2 in sj..ej {
                        store[row + cols[e2] % bs] += wv * vals[e2];
                    }
                }
            }
        }
    }

    let mut keys: Vec<(usize, usize)> = slot.keys().copied().collect();
    keys.sort_unstable();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (bi, bj) in keys {
        let base = slot[&(bi, bj)];
        for a in 0..bs {
            let row = &mut rows[bi * bs + a];
            for k in 0..bs {
                let v = store[base + a * bs + k];
                if v != 0.0 || (bi == bj && a == k) {
                    row.push((bj * bs + k, v));
                }
            }
        }
    }
    let ata = CsrMatrix::from_rows(n, rows);
    let diag_pos = (0..n).map(|i| ata.position(i, i).unwrap()).collect();

    let nb = system.kind.basis_len();
    let gauge = match system.kind.constant_term() {
        Some(ct) => (0..2)
            .map(|coord| (0..nblocks).map(|blk| blk * bs + coord * nb + ct).collect())
            .collect(),
        None => Vec::new(),
    };
    let mut labels = vec![String::new(); nblocks];
    for i in system.free_tiles() {
        labels[system.columns[i].unwrap()] = system.tiles[i].tile_id.clone();
    }
    GramSystem {
        ata,
        atb,
        block_size: bs,
        diag_pos,
        gauge,
        labels,
    }
}

impl GramSystem {
    pub fn n(&self) -> usize {
        self.atb.len()
    }

    /// Adds `diag(λ)·diag(B)²` and `diag(λ)·diag(B)·d`.
    pub fn normal_equations(&self, lambda: &[f64], b_diag: &[f64], d: &[f64]) -> Result<NormalSystem> {
        let n = self.n();
        if lambda.len() != n || b_diag.len() != n || d.len() != n {
            return Err(Error::InvalidInput(format!(
                "regularization vectors must have length {n} (got {}, {}, {})",
                lambda.len(),
                b_diag.len(),
                d.len()
            )));
        }
        if lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidInput("lambda entries must be finite and non-negative".into()));
        }
        let mut a_tilde = self.ata.clone();
        let mut b_tilde = self.atb.clone();
        {
            let data = a_tilde.data_mut();
            for i in 0..n {
                data[self.diag_pos[i]] += lambda[i] * b_diag[i] * b_diag[i];
                b_tilde[i] += lambda[i] * b_diag[i] * d[i];
            }
        }
        let diag: Vec<f64> = self.diag_pos.iter().map(|&k| a_tilde.data()[k]).collect();
        if let Some(i) = diag.iter().position(|v| !(*v > 0.0)) {
            return Err(Error::SingularSystem(format!(
                "coefficient {} of tile `{}` is unconstrained",
                i % self.block_size,
                self.labels[i / self.block_size]
            )));
        }
        let scale = diag.iter().cloned().fold(0.0, f64::max);
        for cols in &self.gauge {
            let mut g = vec![0.0; n];
            cols.iter().for_each(|&c| g[c] = 1.0);
            let unregularized = cols.iter().all(|&c| lambda[c] * b_diag[c] * b_diag[c] == 0.0);
            let ag = self.ata.matvec(&g);
            if unregularized && ag.iter().all(|v| v.abs() <= 1e-10 * scale) {
                return Err(Error::SingularSystem(
                    "a global translation leaves the system unchanged (no tile fixed and no regularization)".into(),
                ));
            }
        }
        Ok(NormalSystem {
            a_tilde,
            b_tilde,
            block_size: self.block_size,
        })
    }
}

/// `Ã = AᵀDA + diag(λ)·diag(B)²`, `b̃ = AᵀDb + diag(λ)·diag(B)·d`.
pub fn build_normal_equations(system: &SparseSystem, lambda: &[f64], b_diag: &[f64], d: &[f64]) -> Result<NormalSystem> {
    gram(system).normal_equations(lambda, b_diag, d)
}
