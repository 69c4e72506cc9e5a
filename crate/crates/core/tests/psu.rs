use std::collections::BTreeSet;
use std::net::TcpListener;
use std::time::Duration;

use splitshield::harness::experiment::{overlapping_ids, psu_in_process};
use splitshield::harness::transport::{channel_pair, TcpTransport};
use splitshield::numerics::Rng;
use splitshield::psu::{
    hash_to_group, pad_with_dummies, run_psu, run_psu_traced, GroupElement, GroupParams, PsuMessage, PsuRun, Role,
};

fn ids(names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|s| s.as_bytes().to_vec()).collect()
}

fn traced(a: &[Vec<u8>], b: &[Vec<u8>], g: &GroupParams, seed: u64) -> (PsuRun, PsuRun) {
    let (ta, tp) = channel_pair();
    let (gp, bv) = (g.clone(), b.to_vec());
    let h = std::thread::spawn(move || run_psu_traced(Role::Passive, &bv, &gp, tp, &mut Rng::new(seed).fork(41)));
    let ra = run_psu_traced(Role::Active, a, g, ta, &mut Rng::new(seed).fork(42)).unwrap();
    (ra, h.join().unwrap().unwrap())
}

fn elements(m: &PsuMessage) -> Vec<&GroupElement> {
    match m {
        PsuMessage::HashedSet { elements, .. } => elements.iter().collect(),
        PsuMessage::PrivateHashRequest(x) | PsuMessage::PrivateHashResponse(x) => vec![x],
        PsuMessage::Done => Vec::new(),
    }
}

#[test]
fn tcp_and_channels_agree() {
    let g = GroupParams::safe128();
    let (a, b) = overlapping_ids(20, 15, 0.4, 3).unwrap();
    let seed = 77;
    let local = psu_in_process(&a, &b, &g, seed).unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (gp, bv) = (g.clone(), b.clone());
    let server = std::thread::spawn(move || {
        let t = TcpTransport::accept(&listener).unwrap();
        run_psu(Role::Passive, &bv, &gp, t, &mut Rng::new(seed).fork(41)).unwrap()
    });
    let t = TcpTransport::connect(addr, Duration::from_secs(5)).unwrap();
    let active = run_psu(Role::Active, &a, &g, t, &mut Rng::new(seed).fork(42)).unwrap();
    let passive = server.join().unwrap();

    assert_eq!(active, local.active);
    assert_eq!(passive, local.passive);
    assert_eq!(local.union_size, 20 + 15 - 6);
    assert!(local.consistent);
}

#[test]
fn every_received_element_is_a_residue_and_no_raw_hash_leaks() {
    let g = GroupParams::safe128();
    let a = ids(&["ann", "bob", "cat", "dan", "eve"]);
    let b = ids(&["cat", "dan", "fay", "gus"]);
    let raw: BTreeSet<GroupElement> = a.iter().chain(&b).map(|id| hash_to_group(id, &g).unwrap()).collect();
    let (ra, rp) = traced(&a, &b, &g, 5);
    let mut count = 0;
    for run in [&ra, &rp] {
        for m in &run.transcript.received {
            for x in elements(m) {
                assert!(g.euler_check(x.value()), "{} carries a non-residue", m.name());
                assert!(!raw.contains(x), "{} carries an unblinded hash", m.name());
                count += 1;
            }
        }
    }
    assert!(count > 0);
}

#[test]
fn private_hashes_land_in_the_union() {
    let g = GroupParams::safe128();
    let a = ids(&["1", "2", "3", "4"]);
    let b = ids(&["3", "4", "5"]);
    let (ra, rp) = traced(&a, &b, &g, 9);
    assert_eq!(ra.map.uids, rp.map.uids);
    assert_eq!(ra.map.len(), 5);
    for (run, own) in [(&ra, &a), (&rp, &b)] {
        assert_eq!(run.map.mapping.len(), own.len());
        for id in own {
            assert!(run.map.position(id).is_some());
        }
    }
    for id in ids(&["3", "4"]) {
        assert_eq!(ra.map.uid(&id), rp.map.uid(&id));
    }
    let owned_a = ra.map.ownership();
    let owned_b = rp.map.ownership();
    assert_eq!(owned_a.iter().filter(|&&o| o).count(), 4);
    assert!(owned_a.iter().zip(&owned_b).all(|(x, y)| *x || *y));
}

#[test]
fn dummy_padding_grows_the_union() {
    let g = GroupParams::safe128();
    let a = ids(&["p", "q", "r"]);
    let b = ids(&["q", "r", "s"]);
    let padded = pad_with_dummies(&a, 6, &mut Rng::new(1));
    assert_eq!(padded.len(), 9);
    assert_eq!(&padded[..3], a.as_slice());
    let plain = psu_in_process(&a, &b, &g, 2).unwrap();
    let grown = psu_in_process(&padded, &b, &g, 2).unwrap();
    assert_eq!(plain.union_size, 4);
    assert_eq!(grown.union_size, 10);
    assert!(grown.consistent);
}

#[test]
fn one_sided_and_identical_sets() {
    let g = GroupParams::safe128();
    let a = ids(&["x", "y"]);
    let same = psu_in_process(&a, &a, &g, 4).unwrap();
    assert_eq!(same.union_size, 2);
    assert!(same.consistent);
    let disjoint = psu_in_process(&a, &ids(&["z"]), &g, 4).unwrap();
    assert_eq!(disjoint.union_size, 3);
    assert_eq!(disjoint.passive.ownership().iter().filter(|&&o| o).count(), 1);
}
