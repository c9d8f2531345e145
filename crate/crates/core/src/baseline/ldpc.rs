//! Rate-2/3 LDPC code: alist fixture loading, progressive-edge-growth
//! construction, systematic encoding and sum-product decoding.
//!
//! The shipped code is a (3,9)-regular n=1536, k=1024 parity-check matrix
//! built offline by PEG (largest-girth greedy edge placement, deterministic
//! tie-breaks) with columns permuted so the last m form an invertible block;
//! it lives in the repository as an alist text fixture and is regenerated
//! bit-identically by the construction test.
//!
//! Decoding is full tanh-rule sum-product belief propagation with early stop
//! on parity satisfaction. LLR convention: positive means bit 0.

use std::collections::VecDeque;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LdpcError {
    #[error("message length {got} does not match k = {expected}")]
    MessageLength { got: usize, expected: usize },
    #[error("llr length {got} does not match n = {expected}")]
    LlrLength { got: usize, expected: usize },
    #[error("alist parse error at line {line}: {reason}")]
    AlistParse { line: usize, reason: String },
    #[error("parity tail of the matrix is singular; fixture is invalid")]
    SingularTail,
    #[error("ldpc io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sparse binary parity-check code with a precomputed systematic encoder.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    /// Codeword length.
    pub n: usize,
    /// Parity checks.
    pub m: usize,
    /// Check -> variable adjacency.
    rows: Vec<Vec<usize>>,
    /// Variable -> check adjacency.
    cols: Vec<Vec<usize>>,
    /// Encoder: parity bit i = parity(enc_rows[i] & message), rows of k bits
    /// packed in u64 words. Derived from inv(B) * A for H = [A | B].
    enc_rows: Vec<Vec<u64>>,
}

impl LdpcCode {
    pub fn k(&self) -> usize {
        self.n - self.m
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n as f64
    }

    pub fn from_adjacency(rows: Vec<Vec<usize>>, n: usize) -> Result<Self, LdpcError> {
        let m = rows.len();
        let mut cols = vec![Vec::new(); n];
        for (c, vars) in rows.iter().enumerate() {
            for &v in vars {
                cols[v].push(c);
            }
        }
        let enc_rows = build_encoder(&rows, n, m)?;
        Ok(Self {
            n,
            m,
            rows,
            cols,
            enc_rows,
        })
    }

    /// Systematic encoding: codeword = [message | parity].
    pub fn encode(&self, msg: &[u8]) -> Result<Vec<u8>, LdpcError> {
        let k = self.k();
        if msg.len() != k {
            return Err(LdpcError::MessageLength {
                got: msg.len(),
                expected: k,
            });
        }
        let words = k.div_ceil(64);
        let mut packed = vec![0u64; words];
        for (i, &b) in msg.iter().enumerate() {
            if b & 1 == 1 {
                packed[i / 64] |= 1 << (i % 64);
            }
        }
        let mut codeword = Vec::with_capacity(self.n);
        codeword.extend_from_slice(msg);
        for row in &self.enc_rows {
            let mut acc = 0u32;
            for (w, p) in row.iter().zip(&packed) {
                acc ^= (w & p).count_ones() & 1;
            }
            codeword.push(acc as u8);
        }
        Ok(codeword)
    }

    /// H * c^T over GF(2); all-zero means a valid codeword.
    pub fn syndrome(&self, codeword: &[u8]) -> Vec<u8> {
        self.rows
            .iter()
            .map(|vars| vars.iter().fold(0u8, |acc, &v| acc ^ (codeword[v] & 1)))
            .collect()
    }

    pub fn parity_ok(&self, codeword: &[u8]) -> bool {
        self.syndrome(codeword).iter().all(|&s| s == 0)
    }

    /// Sum-product decoding with at most `max_iters` iterations.
    ///
    /// Returns the message bits (systematic prefix of the hard decision), a
    /// success flag (parity satisfied at exit) and the iterations used.
    pub fn decode(
        &self,
        llrs: &[f64],
        max_iters: usize,
    ) -> Result<(Vec<u8>, bool, usize), LdpcError> {
        if llrs.len() != self.n {
            return Err(LdpcError::LlrLength {
                got: llrs.len(),
                expected: self.n,
            });
        }
        // R messages per (check, position); totals per variable.
        let mut r_msgs: Vec<Vec<f64>> = self.rows.iter().map(|row| vec![0.0; row.len()]).collect();
        let mut totals: Vec<f64> = llrs.to_vec();
        let hard = |totals: &[f64]| -> Vec<u8> {
            totals.iter().map(|&t| (t < 0.0) as u8).collect()
        };

        let mut decision = hard(&totals);
        if self.parity_ok(&decision) {
            return Ok((decision[..self.k()].to_vec(), true, 0));
        }

        let mut scratch_t: Vec<f64> = Vec::new();
        let mut scratch_prefix: Vec<f64> = Vec::new();
        for iter in 1..=max_iters {
            // Check update with prefix/suffix products (no division).
            let mut r_next: Vec<Vec<f64>> = Vec::with_capacity(self.m);
            for (c, vars) in self.rows.iter().enumerate() {
                let deg = vars.len();
                scratch_t.clear();
                for (pos, &v) in vars.iter().enumerate() {
                    let q = (totals[v] - r_msgs[c][pos]).clamp(-60.0, 60.0);
                    scratch_t.push((q / 2.0).tanh());
                }
                scratch_prefix.clear();
                scratch_prefix.push(1.0);
                for &t in &scratch_t {
                    let last = *scratch_prefix.last().expect("non-empty");
                    scratch_prefix.push(last * t);
                }
                let mut row_out = vec![0.0; deg];
                let mut suffix = 1.0;
                for pos in (0..deg).rev() {
                    let prod = (scratch_prefix[pos] * suffix).clamp(-0.999_999_999_999, 0.999_999_999_999);
                    row_out[pos] = 2.0 * prod.atanh();
                    suffix *= scratch_t[pos];
                }
                r_next.push(row_out);
            }
            r_msgs = r_next;

            // Variable update.
            totals.copy_from_slice(llrs);
            for (c, vars) in self.rows.iter().enumerate() {
                for (pos, &v) in vars.iter().enumerate() {
                    totals[v] += r_msgs[c][pos];
                }
            }

            decision = hard(&totals);
            if self.parity_ok(&decision) {
                return Ok((decision[..self.k()].to_vec(), true, iter));
            }
        }
        Ok((decision[..self.k()].to_vec(), false, max_iters))
    }

    // -- alist serialization ------------------------------------------------

    /// Writes the MacKay alist text format (1-based indices, zero padding).
    pub fn to_alist(&self) -> String {
        let max_col = self.cols.iter().map(Vec::len).max().unwrap_or(0);
        let max_row = self.rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = String::new();
        out.push_str(&format!("{} {}\n", self.n, self.m));
        out.push_str(&format!("{max_col} {max_row}\n"));
        let degrees = |v: &[Vec<usize>]| {
            v.iter()
                .map(|x| x.len().to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        out.push_str(&degrees(&self.cols));
        out.push('\n');
        out.push_str(&degrees(&self.rows));
        out.push('\n');
        let pad_line = |items: &[usize], width: usize| {
            let mut parts: Vec<String> = items.iter().map(|&i| (i + 1).to_string()).collect();
            while parts.len() < width {
                parts.push("0".to_string());
            }
            parts.join(" ")
        };
        for col in &self.cols {
            out.push_str(&pad_line(col, max_col));
            out.push('\n');
        }
        for row in &self.rows {
            out.push_str(&pad_line(row, max_row));
            out.push('\n');
        }
        out
    }

    pub fn save_alist(&self, path: &Path) -> Result<(), LdpcError> {
        std::fs::write(path, self.to_alist())?;
        Ok(())
    }

    pub fn from_alist_str(text: &str) -> Result<Self, LdpcError> {
        let mut lines = text.lines().enumerate();
        let mut next_numbers = |expected: usize| -> Result<(usize, Vec<usize>), LdpcError> {
            for (idx, line) in lines.by_ref() {
                if line.trim().is_empty() {
                    continue;
                }
                let nums: Result<Vec<usize>, _> =
                    line.split_whitespace().map(str::parse::<usize>).collect();
                let nums = nums.map_err(|e| LdpcError::AlistParse {
                    line: idx + 1,
                    reason: e.to_string(),
                })?;
                if expected > 0 && nums.len() < expected {
                    return Err(LdpcError::AlistParse {
                        line: idx + 1,
                        reason: format!("expected {expected} numbers, got {}", nums.len()),
                    });
                }
                return Ok((idx + 1, nums));
            }
            Err(LdpcError::AlistParse {
                line: 0,
                reason: "unexpected end of file".to_string(),
            })
        };

        let (line_no, dims) = next_numbers(2)?;
        if dims.len() < 2 {
            return Err(LdpcError::AlistParse {
                line: line_no,
                reason: "expected n and m".to_string(),
            });
        }
        let (n, m) = (dims[0], dims[1]);
        let (_, _) = next_numbers(2)?; // max degrees, informational
        let (_, col_degs) = next_numbers(n)?;
        let (_, row_degs) = next_numbers(m)?;
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); m];
        // Column adjacency lines (consume, cross-check degrees).
        for (v, &deg) in col_degs.iter().take(n).enumerate() {
            let (line_no, nums) = next_numbers(0)?;
            let nonzero: Vec<usize> = nums.into_iter().filter(|&x| x != 0).collect();
            if nonzero.len() != deg {
                return Err(LdpcError::AlistParse {
                    line: line_no,
                    reason: format!("column {v} degree mismatch"),
                });
            }
        }
        for (c, &deg) in row_degs.iter().take(m).enumerate() {
            let (line_no, nums) = next_numbers(0)?;
            let vars: Vec<usize> = nums
                .into_iter()
                .filter(|&x| x != 0)
                .map(|x| x - 1)
                .collect();
            if vars.len() != deg {
                return Err(LdpcError::AlistParse {
                    line: line_no,
                    reason: format!("row {c} degree mismatch"),
                });
            }
            if let Some(&bad) = vars.iter().find(|&&v| v >= n) {
                return Err(LdpcError::AlistParse {
                    line: line_no,
                    reason: format!("variable index {bad} out of range"),
                });
            }
            rows[c] = vars;
        }
        Self::from_adjacency(rows, n)
    }

    pub fn load_alist(path: &Path) -> Result<Self, LdpcError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_alist_str(&text)
    }
}

/// Gaussian elimination of `[B | A]` to `[I | inv(B) A]` over GF(2), where B
/// is the last-m-columns block. Fails if B is singular.
fn build_encoder(rows: &[Vec<usize>], n: usize, m: usize) -> Result<Vec<Vec<u64>>, LdpcError> {
    let k = n - m;
    let b_words = m.div_ceil(64);
    let a_words = k.div_ceil(64);
    // Each work row: [B bits | A bits].
    let mut b_part = vec![vec![0u64; b_words]; m];
    let mut a_part = vec![vec![0u64; a_words]; m];
    for (c, vars) in rows.iter().enumerate() {
        for &v in vars {
            if v < k {
                a_part[c][v / 64] |= 1 << (v % 64);
            } else {
                let j = v - k;
                b_part[c][j / 64] |= 1 << (j % 64);
            }
        }
    }
    // Forward elimination with partial row swaps.
    for pivot in 0..m {
        let word = pivot / 64;
        let bit = 1u64 << (pivot % 64);
        let pivot_row = (pivot..m).find(|&r| b_part[r][word] & bit != 0);
        let Some(pr) = pivot_row else {
            return Err(LdpcError::SingularTail);
        };
        b_part.swap(pivot, pr);
        a_part.swap(pivot, pr);
        for r in 0..m {
            if r != pivot && b_part[r][word] & bit != 0 {
                let (bp, ap): (Vec<u64>, Vec<u64>) =
                    (b_part[pivot].clone(), a_part[pivot].clone());
                for (w, x) in b_part[r].iter_mut().zip(&bp) {
                    *w ^= x;
                }
                for (w, x) in a_part[r].iter_mut().zip(&ap) {
                    *w ^= x;
                }
            }
        }
    }
    Ok(a_part)
}

// ---------------------------------------------------------------------------
// Progressive edge growth construction
// ---------------------------------------------------------------------------

/// Deterministic PEG construction for a regular code, followed by a column
/// permutation that makes the last `m` columns invertible for systematic
/// encoding. Ties always break toward the lowest index.
pub fn peg_construct(n: usize, m: usize, var_degree: usize) -> Result<LdpcCode, LdpcError> {
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];

    for v in 0..n {
        for edge in 0..var_degree {
            let target = if edge == 0 {
                lowest_degree_check(&rows, None)
            } else {
                // BFS from v over the current graph; prefer unreachable
                // checks, otherwise the farthest layer.
                let reachable = bfs_check_layers(v, &rows, &cols, m);
                match lowest_degree_check(&rows, Some(&reachable.unreached)) {
                    Some(c) => Some(c),
                    None => lowest_degree_check(&rows, Some(&reachable.farthest)),
                }
                .or_else(|| lowest_degree_check(&rows, None))
            };
            let c = target.expect("at least one check exists");
            rows[c].push(v);
            cols[v].push(c);
        }
    }
    for r in rows.iter_mut() {
        r.sort_unstable();
    }

    // Choose m pivot columns for the parity tail, preferring high indices so
    // the permutation stays close to identity, then reorder.
    let perm = systematic_permutation(&rows, n, m)?;
    let mut permuted_rows: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (c, vars) in rows.iter().enumerate() {
        let mut mapped: Vec<usize> = vars.iter().map(|&v| perm[v]).collect();
        mapped.sort_unstable();
        permuted_rows[c] = mapped;
    }
    LdpcCode::from_adjacency(permuted_rows, n)
}

fn lowest_degree_check(rows: &[Vec<usize>], allowed: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (c, row) in rows.iter().enumerate() {
        if let Some(mask) = allowed {
            if !mask[c] {
                continue;
            }
        }
        match best {
            None => best = Some(c),
            Some(b) => {
                if row.len() < rows[b].len() {
                    best = Some(c);
                }
            }
        }
    }
    best
}

struct ReachResult {
    /// Checks not reachable from the root variable.
    unreached: Vec<bool>,
    /// Checks in the final BFS layer (greatest depth).
    farthest: Vec<bool>,
}

fn bfs_check_layers(
    root: usize,
    rows: &[Vec<usize>],
    cols: &[Vec<usize>],
    m: usize,
) -> ReachResult {
    let mut check_depth = vec![usize::MAX; m];
    let mut var_seen = vec![false; cols.len()];
    var_seen[root] = true;
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new(); // (variable, depth)
    queue.push_back((root, 0));
    let mut max_depth = 0usize;
    while let Some((v, depth)) = queue.pop_front() {
        for &c in &cols[v] {
            if check_depth[c] == usize::MAX {
                check_depth[c] = depth;
                max_depth = max_depth.max(depth);
                for &v2 in &rows[c] {
                    if !var_seen[v2] {
                        var_seen[v2] = true;
                        queue.push_back((v2, depth + 1));
                    }
                }
            }
        }
    }
    let unreached: Vec<bool> = check_depth.iter().map(|&d| d == usize::MAX).collect();
    let farthest: Vec<bool> = check_depth.iter().map(|&d| d == max_depth).collect();
    ReachResult {
        unreached,
        farthest,
    }
}

/// Permutation sending m independent columns to the tail. Works on a dense
/// bit-matrix copy; prefers keeping columns in place (scans from the right).
fn systematic_permutation(rows: &[Vec<usize>], n: usize, m: usize) -> Result<Vec<usize>, LdpcError> {
    let words = n.div_ceil(64);
    let mut mat = vec![vec![0u64; words]; m];
    for (c, vars) in rows.iter().enumerate() {
        for &v in vars {
            mat[c][v / 64] |= 1 << (v % 64);
        }
    }
    // Greedy pivot selection scanning columns right to left.
    let mut pivot_cols: Vec<usize> = Vec::with_capacity(m);
    let mut used_row = vec![false; m];
    let mut reduced = mat.clone();
    for col in (0..n).rev() {
        if pivot_cols.len() == m {
            break;
        }
        let word = col / 64;
        let bit = 1u64 << (col % 64);
        let Some(pivot_row) = (0..m).find(|&r| !used_row[r] && reduced[r][word] & bit != 0) else {
            continue;
        };
        used_row[pivot_row] = true;
        pivot_cols.push(col);
        let pr = reduced[pivot_row].clone();
        for r in 0..m {
            if r != pivot_row && reduced[r][word] & bit != 0 {
                for (w, x) in reduced[r].iter_mut().zip(&pr) {
                    *w ^= x;
                }
            }
        }
    }
    if pivot_cols.len() < m {
        return Err(LdpcError::SingularTail);
    }
    pivot_cols.sort_unstable();
    let mut is_pivot = vec![false; n];
    for &c in &pivot_cols {
        is_pivot[c] = true;
    }
    // Stable order: non-pivot columns first (message positions), then pivot
    // columns (parity positions).
    let mut perm = vec![0usize; n];
    let mut next = 0usize;
    for (v, flag) in is_pivot.iter().enumerate() {
        if !flag {
            perm[v] = next;
            next += 1;
        }
    }
    for (v, flag) in is_pivot.iter().enumerate() {
        if *flag {
            perm[v] = next;
            next += 1;
        }
    }
    Ok(perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_derive;
    use rand::Rng;

    fn small_code() -> LdpcCode {
        peg_construct(24, 8, 3).unwrap()
    }

    #[test]
    fn encode_zero_message_gives_zero_codeword() {
        let code = small_code();
        let msg = vec![0u8; code.k()];
        let cw = code.encode(&msg).unwrap();
        assert!(cw.iter().all(|&b| b == 0));
        assert!(code.parity_ok(&cw));
    }

    #[test]
    fn encoded_codewords_satisfy_parity() {
        let code = small_code();
        let mut rng = rng_derive(4, &[0]).rng();
        for _ in 0..50 {
            let msg: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
            let cw = code.encode(&msg).unwrap();
            assert_eq!(&cw[..code.k()], &msg[..], "systematic prefix");
            assert!(code.parity_ok(&cw));
        }
        assert!(matches!(
            code.encode(&vec![0u8; 3]),
            Err(LdpcError::MessageLength { .. })
        ));
    }

    #[test]
    fn decode_consistent_llrs_in_zero_or_one_iterations() {
        let code = small_code();
        let mut rng = rng_derive(4, &[1]).rng();
        let msg: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
        let cw = code.encode(&msg).unwrap();
        let llrs: Vec<f64> = cw.iter().map(|&b| if b == 0 { 20.0 } else { -20.0 }).collect();
        let (decoded, success, iters) = code.decode(&llrs, 50).unwrap();
        assert!(success);
        assert!(iters <= 1);
        assert_eq!(decoded, msg);
    }

    #[test]
    fn decode_random_llrs_is_total() {
        let code = small_code();
        let mut rng = rng_derive(4, &[2]).rng();
        let llrs: Vec<f64> = (0..code.n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (decoded, _success, iters) = code.decode(&llrs, 20).unwrap();
        assert_eq!(decoded.len(), code.k());
        assert!(iters <= 20);
    }

    #[test]
    fn decoder_fixes_point_on_valid_codewords() {
        let code = small_code();
        let mut rng = rng_derive(4, &[3]).rng();
        for _ in 0..1000 {
            let msg: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
            let cw = code.encode(&msg).unwrap();
            let llrs: Vec<f64> = cw.iter().map(|&b| if b == 0 { 12.0 } else { -12.0 }).collect();
            let (decoded, success, _) = code.decode(&llrs, 5).unwrap();
            assert!(success);
            assert_eq!(decoded, msg);
        }
    }

    #[test]
    fn alist_roundtrip() {
        let code = small_code();
        let text = code.to_alist();
        let reloaded = LdpcCode::from_alist_str(&text).unwrap();
        assert_eq!(reloaded.n, code.n);
        assert_eq!(reloaded.m, code.m);
        assert_eq!(reloaded.rows, code.rows);
        assert_eq!(reloaded.to_alist(), text);
    }

    #[test]
    fn alist_parse_errors_carry_line_numbers() {
        assert!(matches!(
            LdpcCode::from_alist_str("garbage here\n"),
            Err(LdpcError::AlistParse { line: 1, .. })
        ));
        let truncated = "8 4\n3 9\n";
        assert!(matches!(
            LdpcCode::from_alist_str(truncated),
            Err(LdpcError::AlistParse { .. })
        ));
    }

    #[test]
    fn peg_regular_degrees() {
        let code = small_code();
        for col in &code.cols {
            assert_eq!(col.len(), 3);
        }
        let total_edges: usize = code.rows.iter().map(Vec::len).sum();
        assert_eq!(total_edges, 24 * 3);
        // Check degrees are balanced within one of the average.
        let avg = total_edges as f64 / code.m as f64;
        for row in &code.rows {
            assert!((row.len() as f64 - avg).abs() <= 1.0);
        }
    }

    // The shipped fixture regenerates bit-identically from the deterministic
    // construction (provenance check for the versioned file).
    #[test]
    fn shipped_fixture_matches_construction() {
        let path = crate::baseline::shipped_fixture_path();
        let text = std::fs::read_to_string(&path).expect("fixture file present");
        let regenerated = peg_construct(1536, 512, 3).unwrap().to_alist();
        assert_eq!(text, regenerated, "fixture drifted from the construction");
    }

    #[test]
    fn shipped_code_is_rate_two_thirds() {
        let code = LdpcCode::load_alist(&crate::baseline::shipped_fixture_path()).unwrap();
        assert_eq!(code.n, 1536);
        assert_eq!(code.k(), 1024);
        assert_eq!(code.rate(), 2.0 / 3.0);
    }

    #[test]
    #[ignore = "writes the repository fixture; run once when changing the construction"]
    fn write_shipped_fixture() {
        let code = peg_construct(1536, 512, 3).unwrap();
        code.save_alist(&crate::baseline::shipped_fixture_path())
            .unwrap();
    }

    #[test]
    fn corrects_a_few_flipped_bits() {
        let code = small_code();
        let mut rng = rng_derive(4, &[5]).rng();
        let msg: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
        let cw = code.encode(&msg).unwrap();
        let mut llrs: Vec<f64> = cw.iter().map(|&b| if b == 0 { 4.0 } else { -4.0 }).collect();
        // One flipped-sign position with weaker confidence.
        llrs[5] = -llrs[5] * 0.5;
        let (decoded, success, _) = code.decode(&llrs, 50).unwrap();
        assert!(success);
        assert_eq!(decoded, msg);
    }
}
