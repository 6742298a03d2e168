//! Summation and Monte-Carlo statistics helpers.

/// Number of batches used for Monte-Carlo standard errors.
pub const MC_GROUPS: usize = 10;

/// Pairwise (cascade) summation. Reorders `values` in place.
pub fn pairwise_sum(values: &mut [f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mut len = n;
            while len > 1 {
                let half = len / 2;
                for i in 0..half {
                    values[i] = values[2 * i] + values[2 * i + 1];
                }
                if len % 2 == 1 {
                    values[half] = values[len - 1];
                    len = half + 1;
                } else {
                    len = half;
                }
            }
            values[0]
        }
    }
}

/// Reduces `items` with `add` along a fixed binary tree. The result depends
/// only on the order of `items`, never on scheduling.
pub fn pairwise_reduce<T, F>(mut items: Vec<T>, add: F) -> Option<T>
where
    F: Fn(&mut T, &T),
{
    if items.is_empty() {
        return None;
    }
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                add(&mut a, &b);
            }
            next.push(a);
        }
        items = next;
    }
    items.pop()
}

/// Streaming form of [`pairwise_reduce`]: items pushed in a fixed order are
/// combined along the same binary tree, holding only `O(log n)` partials.
pub struct PairwiseAccumulator<T, F> {
    stack: Vec<(u32, T)>,
    add: F,
}

impl<T, F: Fn(&mut T, &T)> PairwiseAccumulator<T, F> {
    pub fn new(add: F) -> Self {
        Self { stack: Vec::new(), add }
    }

    pub fn push(&mut self, item: T) {
        let mut level = 0;
        let mut cur = item;
        while let Some((l, _)) = self.stack.last() {
            if *l != level {
                break;
            }
            let (_, mut left) = self.stack.pop().expect("checked non-empty");
            (self.add)(&mut left, &cur);
            cur = left;
            level += 1;
        }
        self.stack.push((level, cur));
    }

    pub fn finish(mut self) -> Option<T> {
        let (_, mut acc) = self.stack.pop()?;
        while let Some((_, mut left)) = self.stack.pop() {
            (self.add)(&mut left, &acc);
            acc = left;
        }
        Some(acc)
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    pairwise_sum(&mut v) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let mut sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&mut sq) / (n - 1) as f64
}

pub fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
    (pairwise_sum(&mut sq) / xs.len() as f64).sqrt()
}

/// Excess kurtosis `m4 / m2² - 3` (population moments).
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let mut m2: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
    let mut m4: Vec<f64> = xs.iter().map(|x| (x - m).powi(4)).collect();
    let m2 = pairwise_sum(&mut m2) / n;
    let m4 = pairwise_sum(&mut m4) / n;
    m4 / (m2 * m2) - 3.0
}

/// Mean of equally sized batch means and its standard error.
pub fn batch_mean_se(group_means: &[f64]) -> (f64, f64) {
    let g = group_means.len();
    let m = mean(group_means);
    if g < 2 {
        return (m, f64::NAN);
    }
    (m, (variance(group_means) / g as f64).sqrt())
}

/// Delete-one-group jackknife for a smooth function of pooled group sums.
///
/// `groups[g]` holds the sufficient statistics of group `g`; `estimator`
/// maps pooled (summed) statistics to the estimate. Returns
/// `(estimate, standard error)`.
pub fn jackknife<F>(groups: &[Vec<f64>], estimator: F) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let g = groups.len();
    assert!(g >= 2, "jackknife needs at least two groups");
    let k = groups[0].len();
    let mut total = vec![0.0; k];
    for grp in groups {
        for (t, v) in total.iter_mut().zip(grp) {
            *t += v;
        }
    }
    let full = estimator(&total);
    let loo: Vec<f64> = groups
        .iter()
        .map(|grp| {
            let partial: Vec<f64> = total.iter().zip(grp).map(|(t, v)| t - v).collect();
            estimator(&partial)
        })
        .collect();
    let m = mean(&loo);
    let var = loo.iter().map(|x| (x - m).powi(2)).sum::<f64>() * (g as f64 - 1.0) / g as f64;
    (full, var.sqrt())
}

/// Least-squares line through `(xs, ys)`; returns `(slope, intercept)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
