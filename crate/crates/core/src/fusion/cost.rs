/// Attention score-matrix entries per layer.
///
/// Returns `(bottleneck, direct)` where `bottleneck = (K+N_a)² + (K+N_v)²`
/// (each modality attends over itself plus the `K` tokens) and
/// `direct = (N_a+N_v)²` (one joint attention over both sequences).
pub fn attention_cost(n_a: usize, n_v: usize, k: usize) -> (u64, u64) {
    let sq = |x: usize| (x as u64) * (x as u64);
    (sq(k + n_a) + sq(k + n_v), sq(n_a + n_v))
}
