//! The two party state machines of the set union protocol.
//!
//! Round one exchanges each side's hashed ids raised to both parties' first
//! secrets. The active party merges the two doubly-blinded lists, both
//! parties apply their second and third secrets, and the sorted result is
//! the shared uid set `U`. In the private-hashing phase each party sends
//! its own hashes blinded by its second secret, the peer raises them to all
//! three of its secrets, and the sender strips its blinding while applying
//! the two remaining secrets, which lands each own id on its uid.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::harness::transport::Transport;
use crate::numerics::Rng;

use super::group::{exp_shuffle, hash_to_group, GroupElement, GroupParams, PartySecrets};
use super::wire::{PsuMessage, Round};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Active,
    Passive,
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "active" => Ok(Self::Active),
            "passive" => Ok(Self::Passive),
            other => Err(Error::arg(format!("unknown role {other:?}"))),
        }
    }
}

/// The shared uid set and this party's own-id to uid mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UidMap {
    /// canonical encodings, sorted
    pub uids: Vec<Vec<u8>>,
    pub mapping: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl UidMap {
    pub fn len(&self) -> usize {
        self.uids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uids.is_empty()
    }

    pub fn uid(&self, id: &[u8]) -> Option<&[u8]> {
        self.mapping.get(id).map(Vec::as_slice)
    }

    /// Index of an own id's uid in the shared order.
    pub fn position(&self, id: &[u8]) -> Option<usize> {
        let u = self.mapping.get(id)?;
        self.uids.binary_search(u).ok()
    }

    /// Membership of every shared position in this party's own set.
    pub fn ownership(&self) -> Vec<bool> {
        let mut owned = vec![false; self.uids.len()];
        for u in self.mapping.values() {
            if let Ok(i) = self.uids.binary_search(u) {
                owned[i] = true;
            }
        }
        owned
    }
}

/// Everything one party received, in order, plus its own secrets.
#[derive(Debug, Clone)]
pub struct Transcript {
    pub role: Role,
    pub secrets: PartySecrets,
    pub received: Vec<PsuMessage>,
}

impl Transcript {
    pub fn hashed_set(&self, round: Round) -> Option<&[GroupElement]> {
        self.received.iter().find_map(|m| match m {
            PsuMessage::HashedSet { round: r, elements } if *r == round => Some(elements.as_slice()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PsuRun {
    pub map: UidMap,
    pub transcript: Transcript,
}

/// The received-message log of a completed run.
pub fn transcript_capture(run: &PsuRun) -> &Transcript {
    &run.transcript
}

/// Append `k` random 16-byte ids.
pub fn pad_with_dummies(ids: &[Vec<u8>], k: usize, rng: &mut Rng) -> Vec<Vec<u8>> {
    use rand::RngCore;
    let mut out = ids.to_vec();
    for _ in 0..k {
        let mut id = vec![0u8; 16];
        rng.fill_bytes(&mut id);
        out.push(id);
    }
    out
}

struct Party<'a, T: Transport> {
    params: &'a GroupParams,
    transport: T,
    received: Vec<PsuMessage>,
}

fn abort(e: Error) -> Error {
    match e {
        Error::Protocol(_) => e,
        other => Error::Protocol(format!("transport failure: {other}")),
    }
}

impl<T: Transport> Party<'_, T> {
    fn send(&mut self, msg: &PsuMessage) -> Result<()> {
        let frame = msg.to_frame(self.params)?;
        self.transport.send(&frame).map_err(abort)
    }

    fn send_set(&mut self, round: Round, elements: Vec<GroupElement>) -> Result<()> {
        self.send(&PsuMessage::HashedSet { round, elements })
    }

    fn recv(&mut self) -> Result<PsuMessage> {
        let frame = self.transport.recv().map_err(abort)?;
        let msg = PsuMessage::from_frame(&frame, self.params)?;
        self.received.push(msg.clone());
        Ok(msg)
    }

    fn recv_set(&mut self, round: Round) -> Result<Vec<GroupElement>> {
        match self.recv()? {
            PsuMessage::HashedSet { round: r, elements } if r == round => Ok(elements),
            other => Err(Error::Protocol(format!("expected {round:?}, got {}", other.name()))),
        }
    }

    /// Answer private-hash requests with `x^e` until the peer says done.
    fn serve(&mut self, e: &BigUint) -> Result<()> {
        loop {
            match self.recv()? {
                PsuMessage::PrivateHashRequest(x) => {
                    let y = self.params.pow(&x, e);
                    self.send(&PsuMessage::PrivateHashResponse(y))?;
                }
                PsuMessage::Done => return Ok(()),
                other => {
                    return Err(Error::Protocol(format!(
                        "expected a private-hash request, got {}",
                        other.name()
                    )))
                }
            }
        }
    }

    /// Blind each own hash with `blind`, have the peer exponentiate it, and
    /// finish with `unblind`. Returns the canonical encodings.
    fn query(&mut self, own: &[GroupElement], blind: &BigUint, finish: &BigUint) -> Result<Vec<Vec<u8>>> {
        let mut out = Vec::with_capacity(own.len());
        for x in own {
            self.send(&PsuMessage::PrivateHashRequest(self.params.pow(x, blind)))?;
            match self.recv()? {
                PsuMessage::PrivateHashResponse(y) => out.push(self.params.encode(&self.params.pow(&y, finish))),
                other => {
                    return Err(Error::Protocol(format!(
                        "expected a private-hash response, got {}",
                        other.name()
                    )))
                }
            }
        }
        self.send(&PsuMessage::Done)?;
        Ok(out)
    }
}

fn hash_ids(ids: &[Vec<u8>], params: &GroupParams) -> Result<Vec<GroupElement>> {
    if ids.is_empty() {
        return Err(Error::arg("own id set is empty"));
    }
    let distinct: BTreeSet<&Vec<u8>> = ids.iter().collect();
    if distinct.len() != ids.len() {
        return Err(Error::arg("own ids are not distinct"));
    }
    let hashed = ids
        .iter()
        .map(|id| hash_to_group(id, params))
        .collect::<Result<Vec<_>>>()?;
    let distinct: BTreeSet<&GroupElement> = hashed.iter().collect();
    if distinct.len() != hashed.len() {
        return Err(Error::Collision(format!(
            "{} own ids hash to {} distinct group elements",
            hashed.len(),
            distinct.len()
        )));
    }
    Ok(hashed)
}

fn sorted_uids(params: &GroupParams, set: &[GroupElement]) -> Result<Vec<Vec<u8>>> {
    let mut uids: Vec<Vec<u8>> = set.iter().map(|x| params.encode(x)).collect();
    uids.sort();
    let n = uids.len();
    uids.dedup();
    if uids.len() != n {
        return Err(Error::Consistency("final hashed set contains duplicates".into()));
    }
    Ok(uids)
}

fn build_map(ids: &[Vec<u8>], computed: Vec<Vec<u8>>, uids: Vec<Vec<u8>>) -> Result<UidMap> {
    let mut mapping = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (id, uid) in ids.iter().zip(computed) {
        if uids.binary_search(&uid).is_err() {
            return Err(Error::Consistency("private hash is not an element of U".into()));
        }
        if !seen.insert(uid.clone()) {
            return Err(Error::Collision("two own ids map to the same uid".into()));
        }
        mapping.insert(id.clone(), uid);
    }
    Ok(UidMap { uids, mapping })
}

/// Run one party of the protocol to completion.
pub fn run_psu<T: Transport>(
    role: Role,
    ids: &[Vec<u8>],
    params: &GroupParams,
    transport: T,
    rng: &mut Rng,
) -> Result<UidMap> {
    run_psu_traced(role, ids, params, transport, rng).map(|r| r.map)
}

/// [`run_psu`] that also returns the received-message transcript.
pub fn run_psu_traced<T: Transport>(
    role: Role,
    ids: &[Vec<u8>],
    params: &GroupParams,
    transport: T,
    rng: &mut Rng,
) -> Result<PsuRun> {
    let own = hash_ids(ids, params)?;
    let secrets = PartySecrets::random(params, rng);
    let mut party = Party {
        params,
        transport,
        received: Vec::new(),
    };
    let map = match role {
        Role::Active => active(&mut party, ids, &own, &secrets, rng)?,
        Role::Passive => passive(&mut party, ids, &own, &secrets, rng)?,
    };
    Ok(PsuRun {
        map,
        transcript: Transcript {
            role,
            secrets,
            received: party.received,
        },
    })
}

fn active<T: Transport>(
    party: &mut Party<'_, T>,
    ids: &[Vec<u8>],
    own: &[GroupElement],
    s: &PartySecrets,
    rng: &mut Rng,
) -> Result<UidMap> {
    let g = party.params;
    party.send_set(Round::R1a, exp_shuffle(own, &s.e1, g, rng)?)?;
    let a_st = party.recv_set(Round::R1b)?;
    if a_st.len() != own.len() {
        return Err(Error::Consistency(format!(
            "sent {} elements in round 1a, got {} back",
            own.len(),
            a_st.len()
        )));
    }
    let p_t = party.recv_set(Round::R1c)?;
    let p_ts = exp_shuffle(&p_t, &s.e1, g, rng)?;
    party.send_set(Round::R1d, p_ts.clone())?;

    let merged: Vec<GroupElement> = a_st
        .into_iter()
        .chain(p_ts)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    party.send_set(Round::R2a, exp_shuffle(&merged, &g.mul_exp(&s.e2, &s.e3), g, rng)?)?;
    let fin = party.recv_set(Round::R2b)?;
    if fin.len() != merged.len() {
        return Err(Error::Consistency(format!(
            "union has {} elements but the final set has {}",
            merged.len(),
            fin.len()
        )));
    }
    let uids = sorted_uids(g, &fin)?;

    let computed = party.query(own, &s.e2, &g.mul_exp(&s.e1, &s.e3))?;
    party.serve(&g.mul_exp(&g.mul_exp(&s.e1, &s.e2), &s.e3))?;
    build_map(ids, computed, uids)
}

fn passive<T: Transport>(
    party: &mut Party<'_, T>,
    ids: &[Vec<u8>],
    own: &[GroupElement],
    t: &PartySecrets,
    rng: &mut Rng,
) -> Result<UidMap> {
    let g = party.params;
    let a_s = party.recv_set(Round::R1a)?;
    party.send_set(Round::R1b, exp_shuffle(&a_s, &t.e1, g, rng)?)?;
    party.send_set(Round::R1c, exp_shuffle(own, &t.e1, g, rng)?)?;
    let p_ts = party.recv_set(Round::R1d)?;
    if p_ts.len() != own.len() {
        return Err(Error::Consistency(format!(
            "sent {} elements in round 1c, got {} back",
            own.len(),
            p_ts.len()
        )));
    }
    let merged = party.recv_set(Round::R2a)?;
    let lo = a_s.len().max(own.len());
    let hi = a_s.len() + own.len();
    if merged.len() < lo || merged.len() > hi {
        return Err(Error::Consistency(format!(
            "union of {} and {} elements cannot have {}",
            a_s.len(),
            own.len(),
            merged.len()
        )));
    }
    let fin = exp_shuffle(&merged, &g.mul_exp(&t.e2, &t.e3), g, rng)?;
    let uids = sorted_uids(g, &fin)?;
    party.send_set(Round::R2b, fin)?;

    party.serve(&g.mul_exp(&g.mul_exp(&t.e1, &t.e2), &t.e3))?;
    let computed = party.query(own, &t.e2, &g.mul_exp(&t.e1, &t.e3))?;
    build_map(ids, computed, uids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::transport::channel_pair;

    fn run_pair(a: &[Vec<u8>], p: &[Vec<u8>], g: &GroupParams, seed: u64) -> (Result<PsuRun>, Result<PsuRun>) {
        let (ta, tp) = channel_pair();
        let gp = g.clone();
        let pv = p.to_vec();
        let h = std::thread::spawn(move || run_psu_traced(Role::Passive, &pv, &gp, tp, &mut Rng::new(seed + 1)));
        let ra = run_psu_traced(Role::Active, a, g, ta, &mut Rng::new(seed));
        (ra, h.join().unwrap())
    }

    fn ids(xs: &[&str]) -> Vec<Vec<u8>> {
        xs.iter().map(|s| s.as_bytes().to_vec()).collect()
    }

    #[test]
    fn disjoint_union_at_p23() {
        let g = GroupParams::toy();
        // hashes chosen to be distinct mod 23
        let mut pool = Vec::new();
        let mut seen = BTreeSet::new();
        for i in 0u32.. {
            let id = format!("id{i}").into_bytes();
            if seen.insert(hash_to_group(&id, &g).unwrap()) {
                pool.push(id);
            }
            if pool.len() == 5 {
                break;
            }
        }
        let (a, p) = run_pair(&pool[..2], &pool[2..], &g, 3);
        let (a, p) = (a.unwrap(), p.unwrap());
        assert_eq!(a.map.len(), 5);
        assert_eq!(a.map.uids, p.map.uids);
    }

    #[test]
    fn shared_ids_share_uids() {
        let g = GroupParams::safe128();
        let both = ids(&["x", "y"]);
        let (a, p) = run_pair(&both, &both, &g, 11);
        let (a, p) = (a.unwrap().map, p.unwrap().map);
        assert_eq!(a.len(), 2);
        for id in &both {
            assert_eq!(a.uid(id), p.uid(id));
        }
    }

    #[test]
    fn own_collision_is_reported() {
        let g = GroupParams::toy();
        let mut by_hash: BTreeMap<GroupElement, Vec<u8>> = BTreeMap::new();
        let pair = (0u32..)
            .find_map(|i| {
                let id = i.to_be_bytes().to_vec();
                let h = hash_to_group(&id, &g).unwrap();
                by_hash.insert(h, id.clone()).map(|prev| vec![prev, id])
            })
            .unwrap();
        let (a, p) = run_pair(&pair, &ids(&["z"]), &g, 0);
        assert!(matches!(a, Err(Error::Collision(_))));
        assert!(matches!(p, Err(Error::Protocol(_))));
    }

    #[test]
    fn ownership_flags() {
        let g = GroupParams::safe128();
        let (a, p) = run_pair(&ids(&["a", "b", "c"]), &ids(&["c", "d"]), &g, 5);
        let (a, p) = (a.unwrap().map, p.unwrap().map);
        assert_eq!(a.ownership().iter().filter(|&&o| o).count(), 3);
        assert_eq!(p.ownership().iter().filter(|&&o| o).count(), 2);
        assert_eq!(a.position(b"c"), p.position(b"c"));
    }
}
