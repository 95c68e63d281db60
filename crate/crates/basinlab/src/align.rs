//! Permutation alignment of independently trained members: an exact linear
//! assignment solver, pairwise weight-matching coordinate descent (PCD), and
//! the joint Multi-PCD extension that matches each member against all other
//! currently-permuted members at once.

use rand::seq::SliceRandom;

use crate::ensemble::{EnsembleBundle, Family};
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec, ParamLayout, ParamVector, PermutationSet};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

/// Square matrix of alignment scores; higher is a better match.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Usage(format!(
                "cost matrix data length {} for size {n}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("cost matrix has non-finite entries".into()));
        }
        Ok(CostMatrix { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Usage("cost matrix must be square".into()));
        }
        CostMatrix::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }
}

/// Exact maximum-score assignment via the O(n^3) potentials form of the
/// Hungarian algorithm. Returns `assignment[row] = column` and the total
/// score; ties resolve to the smallest column index, so results are
/// reproducible.
pub fn solve_lap(cost: &CostMatrix) -> Result<(Vec<usize>, f64)> {
    let n = cost.n;
    if n == 0 {
        return Err(Error::Usage("empty cost matrix".into()));
    }
    // minimize the negated scores; column index n is the virtual start
    const FREE: usize = usize::MAX;
    let mut row_potential = vec![0.0f64; n];
    let mut col_potential = vec![0.0f64; n + 1];
    let mut matched_row: Vec<usize> = vec![FREE; n + 1];
    let mut predecessor = vec![0usize; n + 1];

    for row in 0..n {
        matched_row[n] = row;
        let mut j0 = n;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut visited = vec![false; n + 1];
        loop {
            visited[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = FREE;
            for j in 0..n {
                if !visited[j] {
                    let reduced = -cost.at(i0, j) - row_potential[i0] - col_potential[j];
                    if reduced < min_slack[j] {
                        min_slack[j] = reduced;
                        predecessor[j] = j0;
                    }
                    if min_slack[j] < delta {
                        delta = min_slack[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if visited[j] {
                    row_potential[matched_row[j]] += delta;
                    col_potential[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == FREE {
                break;
            }
        }
        // augment along the alternating path back to the virtual column
        loop {
            let j1 = predecessor[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 0..n {
        assignment[matched_row[j]] = j;
    }
    let score = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.at(i, j))
        .sum();
    Ok((assignment, score))
}

/// Permutations found for each aligned member plus the optimization trace.
/// The objective trace is non-decreasing by construction.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    pub perms: Vec<PermutationSet>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
    pub sweep_seed: u64,
}

fn widen_values(params: &ParamVector) -> Vec<f64> {
    params.values().iter().map(|&v| v as f64).collect()
}

/// Matching objective `<target, perm(member)>` summed over all parameters.
fn matching_objective(
    layout: &ParamLayout,
    target: &[f64],
    member: &[f32],
    perms: &PermutationSet,
) -> f64 {
    let permuted = layout.permute_values(member, perms);
    target
        .iter()
        .zip(&permuted)
        .map(|(t, m)| t * *m as f64)
        .sum()
}

/// Cost matrix for one unit group: correlations between target units (already
/// in aligned space) and member units, with the member's other axes gathered
/// by its current permutations. Weight matrices contribute down both axes;
/// bias and norm vectors contribute rank-1 outer products.
fn group_cost(
    layout: &ParamLayout,
    group: usize,
    target: &[f64],
    member: &[f32],
    perms: &PermutationSet,
) -> Result<CostMatrix> {
    let width = layout.groups[group].width;
    let mut cost = CostMatrix::new(width, vec![0.0; width * width])?;
    for tensor in &layout.tensors {
        let t_vals = &target[tensor.offset..tensor.offset + tensor.len()];
        let m_vals = &member[tensor.offset..tensor.offset + tensor.len()];
        match tensor.shape.as_slice() {
            [_] => {
                if tensor.axis_groups[0] == Some(group) {
                    for i in 0..width {
                        for j in 0..width {
                            cost.add(i, j, t_vals[i] * m_vals[j] as f64);
                        }
                    }
                }
            }
            [r, c] => {
                let both = tensor.axis_groups[0] == Some(group)
                    && tensor.axis_groups[1] == Some(group);
                if both {
                    return Err(Error::Usage(format!(
                        "tensor {} maps both axes to one group",
                        tensor.name
                    )));
                }
                if tensor.axis_groups[1] == Some(group) {
                    // columns are group units; gather member rows
                    for row in 0..*r {
                        let m_row = tensor.axis_groups[0]
                            .map_or(row, |g| perms.groups()[g][row]);
                        let t_off = row * c;
                        let m_off = m_row * c;
                        for i in 0..width {
                            let tv = t_vals[t_off + i];
                            for j in 0..width {
                                cost.add(i, j, tv * m_vals[m_off + j] as f64);
                            }
                        }
                    }
                } else if tensor.axis_groups[0] == Some(group) {
                    // rows are group units; gather member columns
                    for i in 0..width {
                        for j in 0..width {
                            let mut dot = 0.0;
                            for col in 0..*c {
                                let m_col = tensor.axis_groups[1]
                                    .map_or(col, |g| perms.groups()[g][col]);
                                dot += t_vals[i * c + col] * m_vals[j * c + m_col] as f64;
                            }
                            cost.add(i, j, dot);
                        }
                    }
                }
            }
            other => {
                return Err(Error::Usage(format!(
                    "rank-{} parameter tensor unsupported",
                    other.len()
                )))
            }
        }
    }
    Ok(cost)
}

struct CoordinateDescent {
    perms: PermutationSet,
    trace: Vec<f64>,
    converged: bool,
    sweeps: usize,
}

/// Coordinate descent over unit groups: each pass solves one exact linear
/// assignment per group in a seeded random order, until a full sweep changes
/// nothing or the sweep budget runs out.
fn descend(
    layout: &ParamLayout,
    target: &[f64],
    member: &[f32],
    init: PermutationSet,
    max_sweeps: usize,
    seed: u64,
) -> Result<CoordinateDescent> {
    let mut perms = init;
    let mut trace = vec![matching_objective(layout, target, member, &perms)];
    let mut converged = false;
    let mut sweeps = 0;
    let group_count = layout.groups.len();
    for sweep in 0..max_sweeps {
        let mut order: Vec<usize> = (0..group_count).collect();
        order.shuffle(&mut rng::rng_from(rng::mix3(seed, tag::SWEEP, sweep as u64)));
        let mut changed = false;
        for &g in &order {
            let cost = group_cost(layout, g, target, member, &perms)?;
            let (assignment, _) = solve_lap(&cost)?;
            if assignment != perms.groups()[g] {
                perms.set_group(g, assignment);
                changed = true;
            }
        }
        sweeps = sweep + 1;
        trace.push(matching_objective(layout, target, member, &perms));
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(CoordinateDescent { perms, trace, converged, sweeps })
}

fn check_shared_spec(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.spec() != b.spec() {
        return Err(Error::Usage("alignment requires a shared model spec".into()));
    }
    Ok(())
}

/// Align `member` onto `reference` by weight matching. The returned
/// permutation maximizes the layer-wise correlation objective; applying it
/// to `member` leaves the network function unchanged.
pub fn pcd_align(
    reference: &ParamVector,
    member: &ParamVector,
    max_sweeps: usize,
    seed: u64,
) -> Result<AlignmentResult> {
    check_shared_spec(reference, member)?;
    let layout = reference.spec().layout();
    let target = widen_values(reference);
    let run = descend(
        &layout,
        &target,
        member.values(),
        PermutationSet::identity(&layout),
        max_sweeps,
        seed,
    )?;
    Ok(AlignmentResult {
        perms: vec![run.perms],
        objective_trace: run.trace,
        converged: run.converged,
        sweeps: run.sweeps,
        sweep_seed: seed,
    })
}

/// Joint alignment: each member is first pairwise-aligned to the reference,
/// then an outer loop re-optimizes every member's permutation against the
/// sum of all other members in their current permuted positions, with member
/// 0 as the fixed reference. Stops at a fixed point or after
/// `max_outer_iters` passes. The reported trace starts at the initialized
/// state and the joint objective (pairwise correlations summed over all
/// pairs) is non-decreasing after every update.
pub fn multi_pcd_align(
    members: &[&ParamVector],
    max_outer_iters: usize,
    max_sweeps: usize,
    seed: u64,
) -> Result<AlignmentResult> {
    if members.len() < 3 {
        return Err(Error::Usage(format!(
            "joint alignment needs at least 3 members, got {}",
            members.len()
        )));
    }
    for member in &members[1..] {
        check_shared_spec(members[0], member)?;
    }
    let layout = members[0].spec().layout();
    let m = members.len();
    let mut perms: Vec<PermutationSet> =
        (0..m).map(|_| PermutationSet::identity(&layout)).collect();
    for i in 1..m {
        let pairwise = pcd_align(members[0], members[i], max_sweeps, rng::mix(seed, i as u64))?;
        perms[i] = pairwise.perms.into_iter().next().unwrap();
    }
    let mut permuted: Vec<Vec<f32>> = members
        .iter()
        .zip(&perms)
        .map(|(p, perm)| layout.permute_values(p.values(), perm))
        .collect();

    let joint_objective = |permuted: &[Vec<f32>]| -> f64 {
        let mut total = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                total += permuted[i]
                    .iter()
                    .zip(&permuted[j])
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum::<f64>();
            }
        }
        total
    };

    let mut trace = vec![joint_objective(&permuted)];
    let mut converged = false;
    let mut total_sweeps = 0;
    for outer in 0..max_outer_iters {
        let mut changed_any = false;
        for i in 1..m {
            // sum of everyone else, already permuted into the aligned space
            let mut target = vec![0.0f64; members[0].len()];
            for (j, other) in permuted.iter().enumerate() {
                if j != i {
                    for (t, v) in target.iter_mut().zip(other) {
                        *t += *v as f64;
                    }
                }
            }
            let run = descend(
                &layout,
                &target,
                members[i].values(),
                perms[i].clone(),
                max_sweeps,
                rng::mix3(seed, outer as u64, i as u64),
            )?;
            total_sweeps += run.sweeps;
            if run.perms != perms[i] {
                changed_any = true;
                permuted[i] = layout.permute_values(members[i].values(), &run.perms);
                perms[i] = run.perms;
            }
        }
        trace.push(joint_objective(&permuted));
        if !changed_any {
            converged = true;
            break;
        }
    }
    Ok(AlignmentResult {
        perms,
        objective_trace: trace,
        converged,
        sweeps: total_sweeps,
        sweep_seed: seed,
    })
}

/// Maximum absolute logit deviation between two parameter vectors over
/// `num_probes` random inputs.
pub fn verify_function_preservation(
    spec: &ModelSpec,
    original: &ParamVector,
    permuted: &ParamVector,
    num_probes: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    let mut rng = rng::rng_from(rng::mix(seed, tag::PROBE));
    let d = spec.input_dim();
    let probes = Tensor::new(
        vec![num_probes, d],
        (0..num_probes * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )?;
    let a = models::forward(spec, original, &probes)?;
    let b = models::forward(spec, permuted, &probes)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max))
}

/// Apply pairwise PCD to every non-reference member of a bundle; the result
/// keeps member 0 untouched and carries per-member alignment traces.
pub fn align_bundle_pcd(
    bundle: &EnsembleBundle,
    max_sweeps: usize,
    seed: u64,
) -> Result<(EnsembleBundle, Vec<AlignmentResult>)> {
    let reference = &bundle.members[0].params;
    let mut new_params = vec![reference.clone()];
    let mut results = Vec::new();
    for (k, member) in bundle.members.iter().enumerate().skip(1) {
        let result = pcd_align(reference, &member.params, max_sweeps, rng::mix(seed, k as u64))?;
        new_params.push(models::apply_permutation(&member.params, &result.perms[0])?);
        results.push(result);
    }
    Ok((bundle.with_member_params(Family::Permuted, new_params)?, results))
}

/// Apply Multi-PCD jointly to a bundle; member 0 stays the fixed reference.
pub fn align_bundle_multi_pcd(
    bundle: &EnsembleBundle,
    max_outer_iters: usize,
    max_sweeps: usize,
    seed: u64,
) -> Result<(EnsembleBundle, AlignmentResult)> {
    let params = bundle.member_params();
    let result = multi_pcd_align(&params, max_outer_iters, max_sweeps, seed)?;
    let new_params = params
        .iter()
        .zip(&result.perms)
        .map(|(p, perm)| models::apply_permutation(p, perm))
        .collect::<Result<Vec<_>>>()?;
    Ok((bundle.with_member_params(Family::Permuted, new_params)?, result))
}
