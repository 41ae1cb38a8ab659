//! Scenario generators for sweeps and the bundled fixtures.
//!
//! Generators build scenario text and parse it, so everything they produce
//! is also expressible in a scenario file.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::scenario::{Fault, Scenario};

const SPACING: f64 = 10.0;
const RADIUS: f64 = 12.0;
const HONEST: [&str; 6] = ["A", "B", "C", "E", "F", "G"];

fn build(text: &str) -> Scenario {
    Scenario::parse(text).unwrap_or_else(|e| panic!("generated scenario is invalid:\n{e}\n{text}"))
}

/// A line `S, h1..hk, D` with `k` intermediate hops. With `with_adversary`,
/// the gap after position `pos` (0 = between S and the first hop, `k` =
/// between the last hop and D) is widened past radio range and bridged by a
/// relay `X` that forwards requests with the lifetime decremented.
pub fn stealth_line(k: usize, pos: usize, with_adversary: bool) -> Scenario {
    assert!((1..=HONEST.len()).contains(&k) && pos <= k, "k in 1..=6 and pos <= k");
    let mut names = vec!["S"];
    names.extend(&HONEST[..k]);
    names.push("D");
    let mut text = String::from("[nodes]\n");
    let mut x = 0.0;
    for (i, n) in names.iter().enumerate() {
        let _ = writeln!(text, "{n} {x} 0");
        if i == pos && with_adversary {
            let _ = writeln!(text, "X {} 0", x + SPACING);
            x += 2.0 * SPACING;
        } else {
            x += SPACING;
        }
    }
    let _ = writeln!(text, "[groups]\ng1 members={}", names.join(","));
    let _ = writeln!(text, "[params]\nlifetime = 8\nradius = {RADIUS}");
    text.push_str("[script]\n20 discover S D\n");
    if with_adversary {
        text.push_str("[adversaries]\nX node mitm_relay\n");
        text.push_str("[expect]\nverdict D reject chain_mismatch\nno_verdict D accept\nno_route S D\n");
    } else {
        text.push_str("[expect]\nverdict D accept\nroute S D\n");
    }
    build(&text)
}

/// Every stealth variant: `k` in 2..=6, every insertion position.
pub fn stealth_family() -> Vec<(usize, usize, Scenario)> {
    (2..=6)
        .flat_map(|k| (0..=k).map(move |pos| (k, pos, stealth_line(k, pos, true))))
        .collect()
}

/// Random connected layout: each node lands within radio range of an
/// earlier one. Returns positions.
pub fn connected_layout(rng: &mut impl Rng, n: usize) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    while pts.len() < n {
        let (bx, by) = pts[rng.gen_range(0..pts.len())];
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = rng.gen_range(0.3 * RADIUS..0.95 * RADIUS);
        let p = ((bx + r * a.cos()).round(), (by + r * a.sin()).round());
        let close = |q: &(f64, f64)| ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
        if pts.iter().any(|q| close(q) <= RADIUS) && pts.iter().all(|q| close(q) >= 1.0) {
            pts.push(p);
        }
    }
    pts
}

/// Hop-count matrix of the unit-disk graph over `pts` (`usize::MAX` when
/// unreachable).
pub fn hop_distances(pts: &[(f64, f64)], radius: f64) -> Vec<Vec<usize>> {
    let n = pts.len();
    let adj =
        |i: usize, j: usize| i != j && ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt() <= radius;
    (0..n)
        .map(|s| {
            let mut d = vec![usize::MAX; n];
            d[s] = 0;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for v in 0..n {
                    if adj(u, v) && d[v] == usize::MAX {
                        d[v] = d[u] + 1;
                        q.push_back(v);
                    }
                }
            }
            d
        })
        .collect()
}

fn node_name(i: usize) -> String {
    format!("N{i}")
}

/// Random single-group topology of `n` nodes with three discoveries and a
/// lifetime that covers the hop diameter.
pub fn random_benign(seed: u64, n: usize) -> Scenario {
    assert!((2..=32).contains(&n));
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pts = connected_layout(&mut rng, n);
    let hops = hop_distances(&pts, RADIUS);
    let diameter = hops.iter().flatten().copied().max().unwrap_or(1).max(1);
    let mut text = String::from("[nodes]\n");
    for (i, (x, y)) in pts.iter().enumerate() {
        let _ = writeln!(text, "{} {x} {y}", node_name(i));
    }
    let names: Vec<String> = (0..n).map(node_name).collect();
    let _ = writeln!(text, "[groups]\ng1 members={}", names.join(","));
    let _ = writeln!(
        text,
        "[params]\nseed = {seed}\nlifetime = {diameter}\nradius = {RADIUS}"
    );
    text.push_str("[script]\n");
    let mut expect = String::from("[expect]\n");
    for k in 0..3 {
        let s = rng.gen_range(0..n);
        let mut d = rng.gen_range(0..n - 1);
        if d >= s {
            d += 1;
        }
        let (s, d) = (node_name(s), node_name(d));
        let _ = writeln!(text, "{} discover {s} {d}", 20 + 10 * k);
        let _ = writeln!(expect, "route {s} {d}");
    }
    text.push_str(&expect);
    build(&text)
}

/// Membership churn in one dense group: joins, leaves, leader crashes
/// (at least 50 ticks apart) and group traffic after each change.
pub fn churn(seed: u64) -> Scenario {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = 12;
    let mut text = String::from("[nodes]\n");
    for i in 0..n {
        let (x, y) = (rng.gen_range(0..8), rng.gen_range(0..8));
        let battery = rng.gen_range(0.3..1.0);
        let _ = writeln!(text, "{} {x} {y} battery={battery:.2}", node_name(i));
    }
    let initial: Vec<usize> = (0..6).collect();
    let names: Vec<String> = initial.iter().map(|i| node_name(*i)).collect();
    let _ = writeln!(text, "[groups]\ng1 members={}", names.join(","));
    let _ = writeln!(text, "[params]\nseed = {seed}");
    text.push_str("[script]\n");
    let mut inside: Vec<usize> = initial;
    let mut outside: Vec<usize> = (6..n).collect();
    let mut t = 12;
    let mut last_crash = 0;
    for step in 0..16 {
        let crash = t - last_crash >= 50 && step % 5 == 4;
        if crash {
            let _ = writeln!(text, "{t} crash_leader g1");
            last_crash = t;
            t += 45;
        } else if !outside.is_empty() && (inside.len() < 3 || rng.gen_bool(0.55)) {
            let i = outside.swap_remove(rng.gen_range(0..outside.len()));
            let _ = writeln!(text, "{t} join {} g1", node_name(i));
            inside.push(i);
            t += 10;
        } else if inside.len() > 2 {
            let i = inside.swap_remove(rng.gen_range(0..inside.len()));
            let _ = writeln!(text, "{t} leave {}", node_name(i));
            outside.push(i);
            t += 3;
        }
        if let Some(s) = inside.choose(&mut rng) {
            let _ = writeln!(text, "{} group_msg {} m{step}", t + 2, node_name(*s));
        }
        t += 5;
    }
    build(&text)
}

/// A leave followed by group traffic under one injected fault.
pub fn fault(f: Fault) -> Scenario {
    let spec = match f {
        Fault::LeakKey => "leak_key",
        Fault::SkipRekey => "skip_rekey",
        Fault::ForgedAdmit => "forged_admit:M",
    };
    build(&format!(
        "[nodes]\nS 0 0\nA 10 0\nB 20 0\nM 10 8\n[groups]\ng1 members=S,A,B\n[params]\nfault = {spec}\n\
         [script]\n12 join M g1\n30 leave B\n40 group_msg A after\n"
    ))
}

/// Two adjacent groups on a line; the source's group on the left.
pub fn two_group(seed: u64) -> Scenario {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (a, b) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
    let mut text = String::from("[nodes]\n");
    let mut g1 = Vec::new();
    let mut g2 = Vec::new();
    for i in 0..a + b {
        let name = node_name(i);
        let y = rng.gen_range(-2..=2);
        let _ = writeln!(text, "{name} {} {y}", i as f64 * 8.0);
        if i < a {
            g1.push(name)
        } else {
            g2.push(name)
        }
    }
    let _ = writeln!(
        text,
        "[groups]\ng1 members={}\ng2 members={}",
        g1.join(","),
        g2.join(",")
    );
    let _ = writeln!(text, "[params]\nseed = {seed}\nlifetime = 8\nradius = {RADIUS}");
    let s = g1.choose(&mut rng).expect("non-empty").clone();
    let d = g2.choose(&mut rng).expect("non-empty").clone();
    let _ = writeln!(text, "[script]\n20 discover {s} {d}\n60 send {s} {d} hello");
    let _ = writeln!(text, "[expect]\nroute {s} {d}");
    build(&text)
}

/// A source that floods a request straight into a neighbouring group.
pub fn foreign_direct(seed: u64) -> Scenario {
    let two = two_group(seed);
    let s = two.groups[0].members[0].clone();
    let d = two.groups[1].members[0].clone();
    let mut text = two.to_string();
    let cut = text.find("[script]").expect("script section");
    text.truncate(cut);
    let _ = writeln!(
        text,
        "[script]\n20 discover_direct {s} {d}\n[expect]\nno_verdict {d} accept\nno_route {s} {d}"
    );
    build(&text)
}

fn line_base(extra: &str) -> String {
    format!("[nodes]\nS 0 0\nA 10 0\nB 20 0\nD 30 0\n[groups]\ng1 members=S,A,B,D\n{extra}")
}

/// Every RREQ crossing A-B is replayed five ticks later.
pub fn rreq_replay() -> Scenario {
    build(&line_base(
        "[adversaries]\nE link A B replay 5 from=20 until=23\n[script]\n20 discover S D\n\
         [expect]\nverdict D accept\nroute S D\n",
    ))
}

/// The reply is replayed toward the source after the route is installed.
pub fn rrep_replay() -> Scenario {
    build(&line_base(
        "[adversaries]\nE link A S replay 5 from=24 until=26\n[script]\n20 discover S D\n\
         [expect]\nroute S D\nverdict S reject stale_seq\n",
    ))
}

/// The session opener is replayed after the freshness window has passed.
pub fn session_replay() -> Scenario {
    build(&line_base(
        "[params]\nwindow = 50\nend = 130\n[adversaries]\nE link S D replay 60 from=40 until=40\n\
         [script]\n40 session S D\n[expect]\nsession S D\nsession_abort S D stale_timestamp\n",
    ))
}
