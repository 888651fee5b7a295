use serde::Serialize;

use super::instance::{dist, Point};

/// Closed tour from the depot through `cities` (indices into the caller's
/// point list) and back.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AgentTour {
    pub cities: Vec<usize>,
    pub length: f64,
}

pub fn tour_length(points: &[Point], depot: Point, order: &[usize]) -> f64 {
    let mut prev = depot;
    let mut total = 0.0;
    for &i in order {
        total += dist(prev, points[i]);
        prev = points[i];
    }
    total + dist(prev, depot)
}

const IMPROVE_TOL: f64 = 1e-12;

/// Length change of the 2-opt move reversing positions `i+1..=j` of the
/// depot-closed sequence `seq`.
fn two_opt_delta(seq: &[Point], i: usize, j: usize) -> f64 {
    let (a, b, c, d) = (seq[i], seq[i + 1], seq[j], seq[j + 1]);
    dist(a, c) + dist(b, d) - dist(a, b) - dist(c, d)
}

fn closed(points: &[Point], depot: Point, order: &[usize]) -> Vec<Point> {
    let mut seq = Vec::with_capacity(order.len() + 2);
    seq.push(depot);
    seq.extend(order.iter().map(|&i| points[i]));
    seq.push(depot);
    seq
}

/// An improving 2-opt move on the tour, if any.
pub fn improving_move(points: &[Point], depot: Point, order: &[usize]) -> Option<(usize, usize)> {
    let seq = closed(points, depot, order);
    let k = order.len();
    for i in 0..k {
        for j in i + 2..=k {
            if two_opt_delta(&seq, i, j) < -IMPROVE_TOL {
                return Some((i, j));
            }
        }
    }
    None
}

/// Nearest-neighbour construction followed by first-improvement 2-opt.
/// Ties go to the lower index, so the result is a function of the input.
pub fn tsp_solve(points: &[Point], cities: &[usize], depot: Point) -> AgentTour {
    let mut left: Vec<usize> = cities.to_vec();
    left.sort_unstable();
    let mut order = Vec::with_capacity(left.len());
    let mut here = depot;
    while !left.is_empty() {
        let (pos, _) = left
            .iter()
            .enumerate()
            .map(|(p, &i)| (p, dist(here, points[i])))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        let next = left.remove(pos);
        here = points[next];
        order.push(next);
    }
    while let Some((i, j)) = improving_move(points, depot, &order) {
        order[i..j].reverse();
    }
    let length = tour_length(points, depot, &order);
    AgentTour { cities: order, length }
}

/// Longest tour.
pub fn minmax_cost(tours: &[AgentTour]) -> f64 {
    tours.iter().map(|t| t.length).fold(0.0, f64::max)
}

/// Tours for every agent under `assignment[i] = agent of city i`.
pub fn solve_assignment(points: &[Point], depot: Point, agents: usize, assignment: &[usize]) -> Vec<AgentTour> {
    let mut groups = vec![Vec::new(); agents];
    for (i, &a) in assignment.iter().enumerate() {
        groups[a].push(i);
    }
    groups.iter().map(|g| tsp_solve(points, g, depot)).collect()
}
