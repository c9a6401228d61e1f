use serde::{Deserialize, Serialize};

use super::StatsError;

/// Items × raters matrix of class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementTable {
    categories: usize,
    items: Vec<Vec<usize>>,
}

impl AgreementTable {
    pub fn new(items: Vec<Vec<usize>>, categories: usize) -> Result<Self, StatsError> {
        let raters = items.first().map(Vec::len).ok_or(StatsError::Empty("agreement table"))?;
        if let Some(row) = items.iter().find(|r| r.len() != raters) {
            return Err(StatsError::Length(format!("item rated {} times, expected {raters}", row.len())));
        }
        if let Some(&class) = items.iter().flatten().find(|&&c| c >= categories) {
            return Err(StatsError::BadClass { class, categories });
        }
        Ok(Self { categories, items })
    }

    /// Builds the table from one column per rater.
    pub fn from_raters(raters: &[&[usize]], categories: usize) -> Result<Self, StatsError> {
        let n = raters.first().map(|r| r.len()).ok_or(StatsError::Empty("rater list"))?;
        if let Some(r) = raters.iter().find(|r| r.len() != n) {
            return Err(StatsError::Length(format!("rater with {} items, expected {n}", r.len())));
        }
        Self::new((0..n).map(|i| raters.iter().map(|r| r[i]).collect()).collect(), categories)
    }

    pub fn items(&self) -> &[Vec<usize>] {
        &self.items
    }

    pub fn raters(&self) -> usize {
        self.items[0].len()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    /// Per-item vote counts per category.
    fn counts(&self) -> Vec<Vec<u64>> {
        self.items
            .iter()
            .map(|row| {
                let mut c = vec![0u64; self.categories];
                for &v in row {
                    c[v] += 1;
                }
                c
            })
            .collect()
    }
}

pub fn fleiss_kappa(table: &AgreementTable) -> Result<f64, StatsError> {
    let n = table.raters() as f64;
    if table.raters() < 2 {
        return Err(StatsError::Empty("fleiss kappa needs two raters"));
    }
    let counts = table.counts();
    let items = counts.len() as f64;
    let p_bar = counts
        .iter()
        .map(|c| (c.iter().map(|&x| (x * x) as f64).sum::<f64>() - n) / (n * (n - 1.0)))
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..table.categories())
        .map(|j| {
            let pj = counts.iter().map(|c| c[j] as f64).sum::<f64>() / (items * n);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(StatsError::Undefined("chance agreement is 1"));
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Share of agreeing rater pairs among all pairs involving `class`.
pub fn specific_agreement(table: &AgreementTable, class: usize) -> Result<f64, StatsError> {
    if class >= table.categories() {
        return Err(StatsError::BadClass {
            class,
            categories: table.categories(),
        });
    }
    let n = table.raters() as u64;
    let (mut num, mut den) = (0u64, 0u64);
    for c in table.counts() {
        let k = c[class];
        num += k * k.saturating_sub(1);
        den += k * (n - 1);
    }
    if den == 0 {
        return Err(StatsError::Undefined("class never chosen (or a single rater)"));
    }
    Ok(num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilliamsIndex {
    pub index: f64,
    /// 95% leave-one-item-out jackknife interval; `None` with fewer than two
    /// items or when a leave-one-out estimate is undefined.
    pub ci: Option<(f64, f64)>,
}

fn agreement(a: &[usize], b: &[usize], skip: Option<usize>) -> (u64, u64) {
    let mut same = 0;
    let mut n = 0;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if Some(i) != skip {
            n += 1;
            same += (x == y) as u64;
        }
    }
    (same, n)
}

fn williams_point(model: &[usize], observers: &[&[usize]], skip: Option<usize>) -> Result<f64, StatsError> {
    let frac = |a: &[usize], b: &[usize]| {
        let (s, n) = agreement(a, b, skip);
        s as f64 / n as f64
    };
    let p0 = observers.iter().map(|o| frac(model, o)).sum::<f64>() / observers.len() as f64;
    let mut pairs = 0.0;
    let mut total = 0.0;
    for j in 0..observers.len() {
        for k in j + 1..observers.len() {
            total += frac(observers[j], observers[k]);
            pairs += 1.0;
        }
    }
    let pj = total / pairs;
    if pj == 0.0 {
        return Err(StatsError::Undefined("observers never agree with each other"));
    }
    Ok(p0 / pj)
}

/// Agreement of `model` with the observers relative to their agreement with
/// each other.
pub fn williams_index(model: &[usize], observers: &[&[usize]]) -> Result<WilliamsIndex, StatsError> {
    if observers.len() < 2 {
        return Err(StatsError::Empty("williams index needs two observers"));
    }
    let n = model.len();
    if n == 0 {
        return Err(StatsError::Empty("no items"));
    }
    if let Some(o) = observers.iter().find(|o| o.len() != n) {
        return Err(StatsError::Length(format!("observer with {} items, model has {n}", o.len())));
    }
    let index = williams_point(model, observers, None)?;
    let ci = if n < 2 {
        None
    } else {
        (0..n)
            .map(|i| williams_point(model, observers, Some(i)))
            .collect::<Result<Vec<f64>, _>>()
            .ok()
            .map(|loo| {
                let m = loo.iter().sum::<f64>() / n as f64;
                let se = ((n as f64 - 1.0) / n as f64 * loo.iter().map(|t| (t - m).powi(2)).sum::<f64>()).sqrt();
                (index - 1.96 * se, index + 1.96 * se)
            })
    };
    Ok(WilliamsIndex { index, ci })
}
