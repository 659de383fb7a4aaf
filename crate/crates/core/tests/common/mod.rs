#![allow(dead_code)]

use fertsae_core::{BirthRecord, CmcDate, Cluster, RegionGraph, SurveyDataset, WomanRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random dataset on two admin1 regions with two admin2 regions each.
pub fn random_dataset(seed: u64, n_women: usize, n_clusters: usize) -> SurveyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters: Vec<Cluster> = (0..n_clusters)
        .map(|c| {
            let admin2 = rng.random_range(0..4);
            let urban = rng.random_bool(0.4);
            Cluster {
                cluster_id: format!("c{c:03}"),
                admin1: admin2 / 2,
                admin2,
                urban,
                stratum_id: format!("{}{}", admin2 / 2, if urban { "u" } else { "r" }),
            }
        })
        .collect();
    let mut women = Vec::new();
    let mut births = Vec::new();
    for j in 0..n_women {
        let interview = 1441 + rng.random_range(0..12u32);
        let age = rng.random_range(180..600u32);
        let dob = interview - age;
        let id = format!("w{j:04}");
        women.push(WomanRecord {
            woman_id: id.clone(),
            cluster_id: clusters[rng.random_range(0..n_clusters)].cluster_id.clone(),
            dob: CmcDate::new(dob as i64).unwrap(),
            interview: CmcDate::new(interview as i64).unwrap(),
            weight: rng.random_range(0.2..3.0),
        });
        let k = rng.random_range(0..6);
        for _ in 0..k {
            let b = rng.random_range(dob + 120..=interview);
            births.push(BirthRecord {
                woman_id: id.clone(),
                birth: CmcDate::new(b as i64).unwrap(),
            });
        }
    }
    let a1 = RegionGraph::path(2);
    let a2 = RegionGraph::lattice(2, 2);
    SurveyDataset::new(women, births, clusters, a1, a2).unwrap()
}
