//! Per-device train/validation/test splits for the closed- and open-world protocols.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::signal::AlignedSample;

/// Fewest samples a device needs to appear in every partition.
pub const MIN_SAMPLES_PER_DEVICE: usize = 5;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClosedSplit {
    pub train: Vec<AlignedSample>,
    pub val: Vec<AlignedSample>,
    pub test: Vec<AlignedSample>,
}

/// An impostor sample presented under a registered identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimedSample {
    pub sample: AlignedSample,
    pub claimed_id: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OpenSplit {
    pub registered: Vec<String>,
    pub train: Vec<AlignedSample>,
    pub val: Vec<AlignedSample>,
    pub test: Vec<AlignedSample>,
    pub impostors: Vec<ClaimedSample>,
}

/// Groups samples by device id, keeping input order inside each group.
pub fn group_by_device(samples: &[AlignedSample]) -> Result<BTreeMap<String, Vec<&AlignedSample>>> {
    let mut groups: BTreeMap<String, Vec<&AlignedSample>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let id = s
            .device_id
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample {i} has no device id")))?;
        groups.entry(id.clone()).or_default().push(s);
    }
    Ok(groups)
}

/// Partition sizes for `n` samples: `round(0.6n)`, `round(0.2n)`, remainder.
pub fn partition_sizes(n: usize) -> (usize, usize, usize) {
    let train = math::round(0.6 * n as f64) as usize;
    let val = math::round(0.2 * n as f64) as usize;
    (train, val, n - train - val)
}

fn split_groups(groups: &BTreeMap<String, Vec<&AlignedSample>>, rng: &mut ChaCha8Rng) -> Result<ClosedSplit> {
    let mut out = ClosedSplit::default();
    for (id, group) in groups {
        if group.len() < MIN_SAMPLES_PER_DEVICE {
            return Err(Error::Data(format!(
                "device {id} has {} samples, splitting needs {MIN_SAMPLES_PER_DEVICE}",
                group.len()
            )));
        }
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.shuffle(rng);
        let (n_train, n_val, _) = partition_sizes(group.len());
        for (pos, &i) in order.iter().enumerate() {
            let s = group[i].clone();
            if pos < n_train {
                out.train.push(s);
            } else if pos < n_train + n_val {
                out.val.push(s);
            } else {
                out.test.push(s);
            }
        }
    }
    Ok(out)
}

/// 60/20/20 split of every device's samples.
pub fn split_closed(samples: &[AlignedSample], seed: u64) -> Result<ClosedSplit> {
    let groups = group_by_device(samples)?;
    if groups.is_empty() {
        return Err(Error::Data("no samples to split".into()));
    }
    split_groups(&groups, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Open-world split: impostor devices are held out entirely and each of their
/// samples claims a uniformly drawn registered id. Registered devices get the
/// closed-world 60/20/20 split, i.e. 80% for training plus validation.
pub fn split_open(samples: &[AlignedSample], impostor_ids: &[String], seed: u64) -> Result<OpenSplit> {
    let groups = group_by_device(samples)?;
    let impostors: BTreeSet<&str> = impostor_ids.iter().map(String::as_str).collect();
    if impostors.len() != impostor_ids.len() {
        return Err(Error::Config("impostor ids contain duplicates".into()));
    }
    if let Some(missing) = impostors.iter().find(|id| !groups.contains_key(**id)) {
        return Err(Error::Config(format!("impostor id `{missing}` has no samples")));
    }
    let (held_out, registered): (BTreeMap<_, _>, BTreeMap<_, _>) =
        groups.into_iter().partition(|(id, _)| impostors.contains(id.as_str()));
    if registered.is_empty() {
        return Err(Error::Data("impostor ids cover every device".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let closed = split_groups(&registered, &mut rng)?;
    let ids: Vec<String> = registered.keys().cloned().collect();
    let mut claimed = Vec::new();
    for group in held_out.values() {
        for s in group {
            let id = ids.choose(&mut rng).expect("registered set is non-empty").clone();
            claimed.push(ClaimedSample {
                sample: (*s).clone(),
                claimed_id: id,
            });
        }
    }
    Ok(OpenSplit {
        registered: ids,
        train: closed.train,
        val: closed.val,
        test: closed.test,
        impostors: claimed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn fake(id: &str, tag: f64) -> AlignedSample {
        AlignedSample::new(
            Matrix::from_vec(2, 2, vec![tag; 4]).unwrap(),
            Matrix::zeros(2, 8),
            Some(id.into()),
        )
        .unwrap()
    }

    fn fleet(devices: usize, per: usize) -> Vec<AlignedSample> {
        (0..devices)
            .flat_map(|d| (0..per).map(move |i| fake(&format!("d{d}"), (d * 1000 + i) as f64)))
            .collect()
    }

    fn tags(v: &[AlignedSample]) -> Vec<u64> {
        v.iter().map(|s| s.rf.get(0, 0) as u64).collect()
    }

    #[test]
    fn closed_split_sizes() {
        let s = split_closed(&fleet(2, 100), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (120, 40, 40));
        let s = split_closed(&fleet(1, 5), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (3, 1, 1));
        assert!(matches!(split_closed(&fleet(1, 4), 1), Err(Error::Data(_))));
        assert_eq!(
            split_closed(&fleet(3, 30), 7).unwrap(),
            split_closed(&fleet(3, 30), 7).unwrap()
        );
        assert_ne!(
            tags(&split_closed(&fleet(3, 30), 7).unwrap().train),
            tags(&split_closed(&fleet(3, 30), 8).unwrap().train)
        );
    }

    proptest! {
        #[test]
        fn closed_split_is_a_partition(seed in any::<u64>(), per in 5usize..40, devices in 1usize..4) {
            let all = fleet(devices, per);
            let s = split_closed(&all, seed).unwrap();
            let mut got: Vec<u64> = [tags(&s.train), tags(&s.val), tags(&s.test)].concat();
            got.sort_unstable();
            let mut want = tags(&all);
            want.sort_unstable();
            prop_assert_eq!(got, want);
            let exact = 0.6 * per as f64 * devices as f64;
            prop_assert!((s.train.len() as f64 - exact).abs() <= devices as f64);
        }
    }

    #[test]
    fn open_split_protocol() {
        let all = fleet(22, 10);
        let impostors = vec!["d3".to_string(), "d17".to_string()];
        let s = split_open(&all, &impostors, 5).unwrap();
        assert_eq!(s.registered.len(), 20);
        assert_eq!(s.impostors.len(), 20);
        assert!(s.impostors.iter().all(|c| s.registered.contains(&c.claimed_id)));
        let held: BTreeSet<_> = s
            .impostors
            .iter()
            .map(|c| c.sample.device_id.clone().unwrap())
            .collect();
        assert_eq!(held.len(), 2);
        for part in [&s.train, &s.val, &s.test] {
            assert!(part.iter().all(|x| !impostors.contains(x.device_id.as_ref().unwrap())));
        }
        assert_eq!(s.train.len() + s.val.len(), 160);
        assert_eq!(s.test.len(), 40);

        let none = split_open(&all, &[], 5).unwrap();
        assert!(none.impostors.is_empty());
        assert_eq!(none.train.len() + none.val.len(), 176);

        let everyone: Vec<String> = (0..22).map(|d| format!("d{d}")).collect();
        assert!(matches!(split_open(&all, &everyone, 5), Err(Error::Data(_))));
        assert!(matches!(
            split_open(&all, &["nope".to_string()], 5),
            Err(Error::Config(_))
        ));
    }
}
