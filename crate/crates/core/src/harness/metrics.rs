use crate::error::{Error, Result};

/// Levenshtein distance with its substitution, insertion and deletion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditStats {
    pub distance: usize,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
}

impl std::ops::AddAssign for EditStats {
    fn add_assign(&mut self, o: Self) {
        self.distance += o.distance;
        self.sub += o.sub;
        self.ins += o.ins;
        self.del += o.del;
    }
}

/// Unit-cost edit distance. Among optimal alignments the backtrace prefers
/// substitution (or match), then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditStats {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, cell) in d.iter_mut().take(w).enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i * w + j] = (d[(i - 1) * w + j - 1] + cost)
                .min(d[(i - 1) * w + j] + 1)
                .min(d[i * w + j - 1] + 1);
        }
    }
    let mut stats = EditStats {
        distance: d[n * w + m],
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i * w + j] == d[(i - 1) * w + j - 1] + cost {
                stats.sub += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i * w + j] == d[(i - 1) * w + j] + 1 {
            stats.del += 1;
            i -= 1;
        } else {
            stats.ins += 1;
            j -= 1;
        }
    }
    stats
}

/// Pooled word error rate in percent, with summed error counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WerSummary {
    pub wer: f64,
    pub errors: EditStats,
    pub ref_words: usize,
}

/// `100 * sum(distance) / sum(reference length)` over `(reference, hypothesis)` pairs.
pub fn wer<T: PartialEq, R: AsRef<[T]>, H: AsRef<[T]>>(pairs: &[(R, H)]) -> Result<WerSummary> {
    let mut errors = EditStats::default();
    let mut ref_words = 0;
    for (r, h) in pairs {
        errors += edit_distance(r.as_ref(), h.as_ref());
        ref_words += r.as_ref().len();
    }
    if ref_words == 0 {
        return Err(Error::contract("total reference length is zero"));
    }
    Ok(WerSummary {
        wer: 100.0 * errors.distance as f64 / ref_words as f64,
        errors,
        ref_words,
    })
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)` of
/// the sorted values (rank at least 1).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("percentile of an empty list"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::contract(format!("percentile {p} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Ok(v[rank.min(v.len()) - 1])
}
