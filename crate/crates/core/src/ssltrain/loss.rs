use numcore::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};

/// Guard on norms in cosine denominators.
pub const NORM_GUARD: f64 = 1e-12;
const MASK: f64 = -1e30;

/// `⟨a,b⟩ / (‖a‖·‖b‖)`, computed in `f64`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("cosine of vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    Ok(dot / (na * nb).sqrt().max(NORM_GUARD))
}

fn normalize_rows<T: Real>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let n = g.l2_norm(z, 1)?;
    let n = g.affine(n, 1.0, NORM_GUARD)?;
    Ok(g.div(z, n)?)
}

fn check_matrix<T: Real>(g: &Graph<T>, z: Var, what: &str) -> Result<(usize, usize)> {
    match *g.shape(z) {
        [n, w] if n > 0 && w > 0 => Ok((n, w)),
        ref s => Err(Error::invalid(format!("{what} must be a non-empty matrix, got {s:?}"))),
    }
}

/// NT-Xent over `2N` rows where rows `2k` and `2k+1` are the two views of
/// sample `k`. Only the self-similarity is excluded from each denominator.
pub fn nt_xent_graph<T: Real>(g: &mut Graph<T>, z: Var, tau: f64) -> Result<Var> {
    let (rows, _) = check_matrix(g, z, "NT-Xent embeddings")?;
    if rows % 2 != 0 {
        return Err(Error::invalid(format!("NT-Xent needs an even number of rows, got {rows}")));
    }
    if tau <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let zn = normalize_rows(g, z)?;
    let zt = g.transpose(zn)?;
    let s = g.matmul(zn, zt)?;
    let s = g.scale(s, 1.0 / tau)?;
    let mask = g.constant(Tensor::from_fn([rows, rows], |i| {
        if i / rows == i % rows {
            T::lit(MASK)
        } else {
            T::zero()
        }
    }));
    let s = g.add(s, mask)?;
    let partner = g.constant(Tensor::from_fn([rows, rows], |i| {
        if (i / rows) ^ 1 == i % rows {
            T::one()
        } else {
            T::zero()
        }
    }));
    let lse = g.logsumexp(s, 1)?;
    let pos = g.mul(s, partner)?;
    let pos = g.sum(pos, &[1], true)?;
    let per_row = g.sub(lse, pos)?;
    Ok(g.mean(per_row, &[], false)?)
}

/// InfoNCE with `queries` against `keys`: row `i` of each side is the same
/// sample, the other keys are negatives.
pub fn info_nce_graph<T: Real>(g: &mut Graph<T>, queries: Var, keys: Var, tau: f64) -> Result<Var> {
    let (n, w) = check_matrix(g, queries, "queries")?;
    if g.shape(keys) != [n, w] {
        return Err(Error::invalid(format!(
            "queries {:?} and keys {:?} must have the same shape",
            g.shape(queries),
            g.shape(keys)
        )));
    }
    if tau <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let q = normalize_rows(g, queries)?;
    let k = normalize_rows(g, keys)?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / tau)?;
    let eye = g.constant(Tensor::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() }));
    let lse = g.logsumexp(s, 1)?;
    let pos = g.mul(s, eye)?;
    let pos = g.sum(pos, &[1], true)?;
    let per_row = g.sub(lse, pos)?;
    Ok(g.mean(per_row, &[], false)?)
}

/// Value of [`nt_xent_graph`].
pub fn nt_xent<T: Real>(z: &Tensor<T>, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let l = nt_xent_graph(&mut g, zv, tau)?;
    Ok(g.value(l).item().as_f64())
}

/// Value of [`info_nce_graph`] with online-tower queries and momentum-tower keys.
pub fn nt_xent_momentum<T: Real>(queries: &Tensor<T>, keys: &Tensor<T>, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let k = g.constant(keys.clone());
    let l = info_nce_graph(&mut g, q, k, tau)?;
    Ok(g.value(l).item().as_f64())
}
