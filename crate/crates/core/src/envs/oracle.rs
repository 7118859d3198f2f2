//! Breadth-first search over environment states, stepping cloned envs with
//! the real transition function.

use std::collections::{HashSet, VecDeque};

use super::{GridEnv, TaskContext, NUM_ACTIONS};

/// Shortest successful action sequence for layout `variant`, if any.
pub fn solve_variant(task: &TaskContext, variant: usize) -> Option<Vec<usize>> {
    let mut root = GridEnv::new(task.clone());
    root.reset_to_variant(variant);
    let mut seen = HashSet::new();
    seen.insert(root.state_key());
    let mut queue = VecDeque::from([(root, Vec::new())]);
    while let Some((env, path)) = queue.pop_front() {
        for a in 0..NUM_ACTIONS {
            let mut next = env.clone();
            let r = next.step(a).expect("active episode");
            let mut p = path.clone();
            p.push(a);
            if r.terminated {
                if r.reward > 0.0 {
                    return Some(p);
                }
                continue;
            }
            if r.truncated {
                continue;
            }
            if seen.insert(next.state_key()) {
                queue.push_back((next, p));
            }
        }
    }
    None
}

/// Minimum over all variants: `(variant, actions)`.
pub fn shortest_solution(task: &TaskContext) -> Option<(usize, Vec<usize>)> {
    (0..task.kind.variant_count())
        .filter_map(|v| solve_variant(task, v).map(|p| (v, p)))
        .min_by_key(|(v, p)| (p.len(), *v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::TaskKind;

    #[test]
    fn every_variant_is_solvable() {
        for kind in crate::envs::TaskKind::ALL {
            let task = TaskContext::new(0, kind);
            for v in 0..kind.variant_count() {
                assert!(solve_variant(&task, v).is_some(), "{} variant {v}", kind.name());
            }
        }
    }

    #[test]
    fn registry_optimal_steps_match_search() {
        for kind in TaskKind::ALL {
            let task = TaskContext::new(0, kind);
            let (_, path) = shortest_solution(&task).unwrap();
            assert_eq!(path.len(), kind.optimal_steps(), "{}", kind.name());
        }
    }

    #[test]
    fn replaying_solution_earns_achievable_reward() {
        for kind in TaskKind::ALL {
            let task = TaskContext::new(0, kind);
            let (v, path) = shortest_solution(&task).unwrap();
            let mut env = GridEnv::new(task.clone());
            env.reset_to_variant(v);
            let mut last = None;
            for &a in &path {
                last = Some(env.step(a).unwrap());
            }
            let last = last.unwrap();
            assert!(last.terminated);
            assert!((last.reward - task.achievable_reward()).abs() < 1e-12);
        }
    }
}
