//! Rigid-model approximation used as the regularization target.
//!
//! Matches are centered per pair, a similarity-augmented linear system gives a
//! 2×2 block per tile, each block is rescaled to unit area, and translations
//! are then solved separately on the rotated points.

use std::collections::BTreeMap;

use log::warn;

use crate::assembly::{
    build_augmented_system, build_normal_equations, build_system, fix_tiles, prepare_pairs, MatchFilter, MatchSet,
    Solution, SparseSystem,
};
use crate::error::{Error, Result};
use crate::model::{ModelKind, Point2, TileSpec, TransformParams};
use crate::regularize::{expand_for_system, LambdaSpec, PriorVector};
use crate::solvers::solve_direct;

/// Row-major 2×2 block `(m1, m2, m3, m4)`.
pub type Block = [f64; 4];

pub const IDENTITY_BLOCK: Block = [1.0, 0.0, 0.0, 1.0];

/// One match set translated to the centroid of each side.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredMatches {
    pub set: MatchSet,
    pub p_centroid: Point2,
    pub q_centroid: Point2,
}

fn centroid(pts: &[Point2]) -> Point2 {
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    Point2::new(sx / n, sy / n)
}

/// Centers each side of every pair; pairs with fewer than two points are
/// dropped.
pub fn center_matches(matches: &[MatchSet]) -> Vec<CenteredMatches> {
    matches
        .iter()
        .filter(|m| {
            if m.len() < 2 {
                warn!("pair {}-{} has fewer than 2 matches; skipped for the prior", m.p_tile, m.q_tile);
            }
            m.len() >= 2
        })
        .map(|m| {
            let (cp, cq) = (centroid(&m.p), centroid(&m.q));
            let shift = |pts: &[Point2], c: Point2| pts.iter().map(|p| Point2::new(p.x - c.x, p.y - c.y)).collect();
            CenteredMatches {
                set: MatchSet {
                    p: shift(&m.p, cp),
                    q: shift(&m.q, cq),
                    ..m.clone()
                },
                p_centroid: cp,
                q_centroid: cq,
            }
        })
        .collect()
}

/// The similarity-augmented system over centered matches, with the tile of
/// lowest id fixed to the identity block.
pub fn build_similarity_system(tiles: &[TileSpec], centered: &[CenteredMatches]) -> Result<SparseSystem> {
    let sets: Vec<MatchSet> = centered.iter().map(|c| c.set.clone()).collect();
    let (used, pairs) = prepare_pairs(tiles, &sets, MatchFilter::default())?;
    let system = build_augmented_system(used, pairs);
    let mut fixed = BTreeMap::new();
    fixed.insert(
        system.tiles[0].tile_id.clone(),
        TransformParams {
            kind: ModelKind::RigidApprox,
            coeffs: IDENTITY_BLOCK.to_vec(),
        },
    );
    fix_tiles(&system, &fixed)
}

/// Solves the similarity system; blocks are keyed by tile id.
pub fn solve_similarity(tiles: &[TileSpec], matches: &[MatchSet]) -> Result<BTreeMap<String, Block>> {
    let system = build_similarity_system(tiles, &center_matches(matches))?;
    let n = system.ncols();
    let ns = build_normal_equations(&system, &vec![0.0; n], &vec![1.0; n], &vec![0.0; n])?;
    let rep = solve_direct(&ns)?;
    Ok(system
        .unpack(&rep.x)
        .into_iter()
        .map(|(id, t)| (id, [t.coeffs[0], t.coeffs[1], t.coeffs[2], t.coeffs[3]]))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rescaled {
    pub block: Block,
    /// `sqrt(|det|)` of the block before rescaling.
    pub scale_removed: f64,
}

/// Divides a block by `sqrt(|det|)`.
pub fn rescale_block(tile: &str, m: Block) -> Result<Rescaled> {
    let det = m[0] * m[3] - m[1] * m[2];
    if !(det.abs() >= 1e-14) {
        return Err(Error::DegenerateBlock {
            tile: tile.to_string(),
            det,
        });
    }
    let s = det.abs().sqrt();
    Ok(Rescaled {
        block: m.map(|v| v / s),
        scale_removed: s,
    })
}

/// Rescales every block to unit area. Degenerate blocks fall back to the
/// identity and are listed in the second return value.
pub fn rescale_to_unit_area(blocks: &BTreeMap<String, Block>) -> (BTreeMap<String, Rescaled>, Vec<String>) {
    let mut degenerate = Vec::new();
    let out = blocks
        .iter()
        .map(|(id, m)| {
            let r = rescale_block(id, *m).unwrap_or_else(|e| {
                warn!("{e}; using the identity rotation");
                degenerate.push(id.clone());
                Rescaled {
                    block: IDENTITY_BLOCK,
                    scale_removed: 1.0,
                }
            });
            (id.clone(), r)
        })
        .collect();
    (out, degenerate)
}

fn rotate(m: &Block, p: Point2) -> Point2 {
    Point2::new(m[0] * p.x + m[1] * p.y, m[2] * p.x + m[3] * p.y)
}

/// Least-squares translations for fixed linear blocks, with the tile of
/// lowest id held at `t = 0`.
pub fn solve_translations(
    tiles: &[TileSpec],
    matches: &[MatchSet],
    rotations: &BTreeMap<String, Block>,
) -> Result<BTreeMap<String, [f64; 2]>> {
    let block = |id: &str| rotations.get(id).copied().unwrap_or(IDENTITY_BLOCK);
    let rotated: Vec<MatchSet> = matches
        .iter()
        .map(|m| {
            let (mp, mq) = (block(&m.p_tile), block(&m.q_tile));
            MatchSet {
                p: m.p.iter().map(|p| rotate(&mp, *p)).collect(),
                q: m.q.iter().map(|q| rotate(&mq, *q)).collect(),
                ..m.clone()
            }
        })
        .collect();
    let system = build_system(tiles, &rotated, ModelKind::Translation, MatchFilter::default())?;
    let mut fixed = BTreeMap::new();
    fixed.insert(system.tiles[0].tile_id.clone(), TransformParams::identity(ModelKind::Translation));
    let system = fix_tiles(&system, &fixed)?;
    let n = system.ncols();
    let ns = build_normal_equations(&system, &vec![0.0; n], &vec![1.0; n], &vec![0.0; n])?;
    let rep = solve_direct(&ns)?;
    Ok(system
        .unpack(&rep.x)
        .into_iter()
        .map(|(id, t)| (id, [t.coeffs[0], t.coeffs[1]]))
        .collect())
}

/// Per-tile rigid approximation: a unit-area linear block and a translation.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidApproxSolution {
    pub tiles: BTreeMap<String, RigidTile>,
    /// Tiles whose similarity block was degenerate.
    pub degenerate: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTile {
    pub m: Block,
    pub t: [f64; 2],
    pub scale_removed: f64,
}

impl RigidTile {
    pub fn affine(&self) -> TransformParams {
        TransformParams::affine(self.m, self.t)
    }

    /// Rotation angle in radians of the similarity closest to `m`.
    pub fn angle(&self) -> f64 {
        let [m1, m2, m3, m4] = self.m;
        (m3 - m2).atan2(m1 + m4)
    }
}

impl RigidApproxSolution {
    /// The approximation expressed under `kind`.
    pub fn transforms(&self, kind: ModelKind) -> Solution {
        self.tiles
            .iter()
            .map(|(id, r)| (id.clone(), r.affine().convert_to(kind)))
            .collect()
    }
}

/// Runs the full estimate: center, similarity solve, rescale, translations.
pub fn estimate(tiles: &[TileSpec], matches: &[MatchSet]) -> Result<RigidApproxSolution> {
    let blocks = solve_similarity(tiles, matches)?;
    let (rescaled, degenerate) = rescale_to_unit_area(&blocks);
    let rotations: BTreeMap<String, Block> = rescaled.iter().map(|(id, r)| (id.clone(), r.block)).collect();
    let translations = solve_translations(tiles, matches, &rotations)?;
    let tiles = translations
        .into_iter()
        .map(|(id, t)| {
            let (m, scale_removed) = rescaled
                .get(&id)
                .map(|r| (r.block, r.scale_removed))
                .unwrap_or((IDENTITY_BLOCK, 1.0));
            (id, RigidTile { m, t, scale_removed })
        })
        .collect();
    Ok(RigidApproxSolution { tiles, degenerate })
}

/// Target vector `d` (rigid approximation in the layout of `system.kind`),
/// `B = I` and the expanded weights for the unknowns of `system`.
pub fn assemble_prior(rigid: &Solution, system: &SparseSystem, spec: &LambdaSpec) -> Result<PriorVector> {
    let nc = system.coeffs_per_tile();
    let mut d = Vec::with_capacity(system.ncols());
    for i in system.free_tiles() {
        let id = &system.tiles[i].tile_id;
        let t = rigid.get(id).ok_or_else(|| Error::UnknownTile(id.clone()))?;
        let coeffs = t.convert_to(system.kind).coeffs;
        debug_assert_eq!(coeffs.len(), nc);
        d.extend(coeffs);
    }
    Ok(PriorVector {
        b_diag: vec![1.0; d.len()],
        lambda_diag: expand_for_system(spec, system)?,
        d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(id: &str) -> TileSpec {
        TileSpec::new(id, 0, 100.0, 100.0).unwrap()
    }

    fn rot(theta: f64) -> Block {
        let (s, c) = theta.sin_cos();
        [c, -s, s, c]
    }

    fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
        v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    #[test]
    fn centering_examples() {
        let m = MatchSet::new("a", "b", pts(&[(0.0, 0.0), (2.0, 0.0)]), pts(&[(5.0, 5.0), (7.0, 5.0)]), None).unwrap();
        let c = &center_matches(&[m])[0];
        assert_eq!(c.set.p, pts(&[(-1.0, 0.0), (1.0, 0.0)]));
        assert_eq!(c.p_centroid, Point2::new(1.0, 0.0));

        let single = MatchSet::new("a", "b", pts(&[(0.0, 0.0)]), pts(&[(0.0, 0.0)]), None).unwrap();
        assert!(center_matches(&[single]).is_empty());
    }

    /// Points of `b` seen from `a` under `b = R·a + t`, so that
    /// `M_a·p = M_b·q` with `M_a = I` gives `M_b = R⁻¹`.
    fn rotated_pair(theta: f64, n: usize) -> MatchSet {
        let r = rot(theta);
        let p: Vec<Point2> = (0..n)
            .map(|i| Point2::new(10.0 + (i * 37 % 80) as f64, 5.0 + (i * 53 % 90) as f64))
            .collect();
        let q: Vec<Point2> = p.iter().map(|p| {
            let v = rotate(&r, *p);
            Point2::new(v.x - 40.0, v.y + 7.0)
        }).collect();
        MatchSet::new("a", "b", p, q, None).unwrap()
    }

    #[test]
    fn two_tile_rotation_is_recovered() {
        let theta = 10f64.to_radians();
        let blocks = solve_similarity(&[tile("a"), tile("b")], &[rotated_pair(theta, 12)]).unwrap();
        assert_eq!(blocks["a"], IDENTITY_BLOCK);
        let expect = rot(-theta);
        for k in 0..4 {
            assert!((blocks["b"][k] - expect[k]).abs() < 1e-9, "{:?}", blocks["b"]);
        }
        let sys = build_similarity_system(&[tile("a"), tile("b")], &center_matches(&[rotated_pair(theta, 12)])).unwrap();
        assert_eq!(sys.nrows(), 2 * 2 * 12);
    }

    #[test]
    fn identical_tiles_give_identity() {
        let p = pts(&[(1.0, 2.0), (30.0, 4.0), (5.0, 60.0)]);
        let m = MatchSet::new("a", "b", p.clone(), p, None).unwrap();
        let blocks = solve_similarity(&[tile("a"), tile("b")], std::slice::from_ref(&m)).unwrap();
        for k in 0..4 {
            assert!((blocks["b"][k] - IDENTITY_BLOCK[k]).abs() < 1e-12);
        }
        let t = solve_translations(&[tile("a"), tile("b")], &[m], &BTreeMap::new()).unwrap();
        assert!(t["b"][0].abs() < 1e-12 && t["b"][1].abs() < 1e-12);
    }

    #[test]
    fn rescale_examples() {
        let theta = 0.3;
        let half = rot(theta).map(|v| 0.5 * v);
        let r = rescale_block("t", half).unwrap();
        assert!((r.scale_removed - 0.5).abs() < 1e-15);
        for k in 0..4 {
            assert!((r.block[k] - rot(theta)[k]).abs() < 1e-15);
        }
        let id = rescale_block("t", IDENTITY_BLOCK).unwrap();
        assert_eq!((id.block, id.scale_removed), (IDENTITY_BLOCK, 1.0));
        assert!(matches!(rescale_block("t", [1.0, 2.0, 2.0, 4.0]), Err(Error::DegenerateBlock { .. })));
        let mut blocks = BTreeMap::new();
        blocks.insert("bad".to_string(), [0.0; 4]);
        let (out, degenerate) = rescale_to_unit_area(&blocks);
        assert_eq!(out["bad"].block, IDENTITY_BLOCK);
        assert_eq!(degenerate, vec!["bad".to_string()]);
    }

    #[test]
    fn translation_offset_is_recovered() {
        let p = pts(&[(90.0, 10.0), (95.0, 50.0), (92.0, 80.0)]);
        let q: Vec<Point2> = p.iter().map(|p| Point2::new(p.x - 100.0, p.y)).collect();
        let m = MatchSet::new("a", "b", p, q, None).unwrap();
        let t = solve_translations(&[tile("a"), tile("b")], &[m], &BTreeMap::new()).unwrap();
        assert_eq!(t["a"], [0.0, 0.0]);
        assert!((t["b"][0] - 100.0).abs() < 1e-10 && t["b"][1].abs() < 1e-10);
    }

    #[test]
    fn prior_layout_follows_coefficients() {
        let theta = 0.2;
        let r = RigidTile {
            m: rot(theta),
            t: [3.0, -4.0],
            scale_removed: 1.0,
        };
        let mut rigid = Solution::new();
        rigid.insert("a".to_string(), r.affine());
        rigid.insert("b".to_string(), RigidTile { m: IDENTITY_BLOCK, t: [0.0, 0.0], scale_removed: 1.0 }.affine());
        let p = pts(&[(1.0, 2.0), (3.0, 1.0)]);
        let m = MatchSet::new("a", "b", p.clone(), p, None).unwrap();
        let sys = build_system(&[tile("a"), tile("b")], std::slice::from_ref(&m), ModelKind::Affine, MatchFilter::default()).unwrap();
        let prior = assemble_prior(&rigid, &sys, &LambdaSpec::uniform(0.1)).unwrap();
        let (s, c) = theta.sin_cos();
        assert_eq!(&prior.d[..6], &[c, -s, 3.0, s, c, -4.0]);
        assert_eq!(&prior.d[6..], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(prior.lambda_diag, vec![0.1; 12]);

        let sys = build_system(&[tile("a"), tile("b")], &[m], ModelKind::Poly2, MatchFilter::default()).unwrap();
        let prior = assemble_prior(&rigid, &sys, &LambdaSpec::uniform(0.1)).unwrap();
        assert_eq!(&prior.d[..12], &[c, -s, 3.0, 0.0, 0.0, 0.0, s, c, -4.0, 0.0, 0.0, 0.0]);
    }
}
