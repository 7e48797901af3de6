use crate::ablation::Mask;
use crate::error::{Error, Result};

fn check(a: &Mask, b: &Mask) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(
            "dice",
            &[a.height(), a.width()],
            &[b.height(), b.width()],
        ));
    }
    Ok(())
}

/// Dice overlap of binary maps; two empty maps score 1.
pub fn dice_binary(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dice", &[a.len()], &[b.len()]));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Dice of class `class` between two label maps; both-empty scores 1.
pub fn dice(a: &Mask, b: &Mask, class: u8) -> Result<f64> {
    check(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (x, y) = (x == class, y == class);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Dice of each foreground class `1..C`.
pub fn per_class_dice(a: &Mask, b: &Mask) -> Result<Vec<f64>> {
    let c = a.num_classes().max(b.num_classes());
    (1..c).map(|k| dice(a, b, k as u8)).collect()
}

/// Mean Dice over foreground classes `1..C` (1 when there are none).
pub fn mean_foreground_dice(a: &Mask, b: &Mask) -> Result<f64> {
    let d = per_class_dice(a, b)?;
    if d.is_empty() {
        check(a, b)?;
        return Ok(1.0);
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Per-image mean foreground Dice averaged over pairs, plus the per-class
/// averages.
pub fn dataset_dice(a: &[Mask], b: &[Mask]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "{} masks compared with {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Contract("no masks to compare".into()));
    }
    let mut mean = 0.0;
    let mut per: Vec<f64> = Vec::new();
    for (x, y) in a.iter().zip(b) {
        let d = per_class_dice(x, y)?;
        if per.is_empty() {
            per = vec![0.0; d.len()];
        }
        for (p, v) in per.iter_mut().zip(&d) {
            *p += v;
        }
        mean += mean_foreground_dice(x, y)?;
    }
    let n = a.len() as f64;
    Ok((mean / n, per.into_iter().map(|v| v / n).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(labels: &[u8]) -> Mask {
        Mask::new(labels.len(), 1, 4, labels.to_vec()).unwrap()
    }

    #[test]
    fn spec_examples() {
        let a = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = mask(&[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        let c = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.5);
        // class 2 absent from both
        assert_eq!(dice(&a, &c, 2).unwrap(), 1.0);
        assert_eq!(
            mean_foreground_dice(&a, &c).unwrap(),
            (0.5 + 1.0 + 1.0) / 3.0
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = mask(&[0, 1]);
        let b = mask(&[0, 1, 2]);
        assert!(matches!(dice(&a, &b, 1), Err(Error::Shape { .. })));
        assert!(dice_binary(&[true], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_bounded(
            a in proptest::collection::vec(0u8..4, 16),
            b in proptest::collection::vec(0u8..4, 16),
        ) {
            let (x, y) = (mask(&a), mask(&b));
            for c in 0..4u8 {
                let d = dice(&x, &y, c).unwrap();
                prop_assert_eq!(d, dice(&y, &x, c).unwrap());
                prop_assert!((0.0..=1.0).contains(&d));
            }
        }
    }
}
