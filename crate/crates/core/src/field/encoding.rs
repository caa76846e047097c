/// One-blob encoding of a point already normalized into `[0, 1]^D`.
///
/// Each axis contributes `bins` Gaussian responses centred at
/// `(k + 0.5) / bins` with width `1 / bins`; axes are concatenated in order.
/// Inputs outside `[0, 1]` are clamped.
pub fn one_blob_encode(u: &[f64], bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; u.len() * bins];
    one_blob_into(u, bins, &mut out);
    out
}

pub(crate) fn one_blob_into(u: &[f64], bins: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), u.len() * bins);
    let sigma = 1.0 / bins as f64;
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    for (axis, &x) in u.iter().enumerate() {
        let x = x.clamp(0.0, 1.0);
        let row = &mut out[axis * bins..(axis + 1) * bins];
        for (k, r) in row.iter_mut().enumerate() {
            let c = (k as f64 + 0.5) / bins as f64;
            let d = x - c;
            *r = (-d * d * inv_two_var).exp();
        }
    }
}
