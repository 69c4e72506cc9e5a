//! The prime-order subgroup `QR(Z_p*)` of a safe-prime field.

use std::fmt;

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// RFC 3526 group 14 (2048-bit MODP) prime.
const MODP_2048: &str = "\
FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DD\
EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED\
EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F\
83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B\
E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA0510\
15728E5A8AACAA68FFFFFFFFFFFFFFFF";

/// A 128-bit safe prime, for fast experiments only.
const SAFE_128: &str = "9790665b8953e39c93f2f53d74ab3af7";

/// Safe prime `p` with `q = (p - 1) / 2` prime.
#[derive(Clone, PartialEq, Eq)]
pub struct GroupParams {
    p: BigUint,
    q: BigUint,
    width: usize,
}

impl fmt::Debug for GroupParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupParams({} bits)", self.p.bits())
    }
}

impl GroupParams {
    /// Validates that `p` is a safe prime.
    pub fn new(p: BigUint) -> Result<Self> {
        if p < BigUint::from(23u32) {
            return Err(Error::arg("group prime must be at least 23"));
        }
        let params = Self::unchecked(p);
        let mut rng = Rng::new(0x5afe);
        if !is_probable_prime(&params.p, 32, &mut rng) || !is_probable_prime(&params.q, 32, &mut rng) {
            return Err(Error::arg("modulus is not a safe prime"));
        }
        Ok(params)
    }

    fn unchecked(p: BigUint) -> Self {
        let q = (&p - 1u32) >> 1;
        let width = (p.bits() as usize).div_ceil(8);
        Self { p, q, width }
    }

    fn from_hex(h: &str) -> Self {
        Self::unchecked(BigUint::parse_bytes(h.as_bytes(), 16).expect("valid hex constant"))
    }

    /// The default production group.
    pub fn modp2048() -> Self {
        Self::from_hex(MODP_2048)
    }

    /// Small but non-trivial group; not for production use.
    pub fn safe128() -> Self {
        Self::from_hex(SAFE_128)
    }

    /// `p = 23`, `q = 11`: collisions are common, for tests only.
    pub fn toy() -> Self {
        Self::unchecked(BigUint::from(23u32))
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "modp2048" => Ok(Self::modp2048()),
            "safe128" => Ok(Self::safe128()),
            "toy23" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown group {other:?}"))),
        }
    }

    pub fn p(&self) -> &BigUint {
        &self.p
    }

    pub fn q(&self) -> &BigUint {
        &self.q
    }

    /// Bytes in a canonical element encoding.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Quadratic residuosity via the Jacobi symbol, which equals the
    /// Legendre symbol for prime `p`.
    pub fn is_member(&self, x: &BigUint) -> bool {
        !x.is_zero() && x < &self.p && jacobi(x, &self.p) == 1
    }

    /// Euler criterion `x^q = 1 (mod p)`; slower than [`is_member`](Self::is_member).
    pub fn euler_check(&self, x: &BigUint) -> bool {
        !x.is_zero() && x < &self.p && x.modpow(&self.q, &self.p).is_one()
    }

    pub fn element(&self, x: BigUint) -> Result<GroupElement> {
        if self.is_member(&x) {
            Ok(GroupElement(x))
        } else {
            Err(Error::Protocol("value is not a quadratic residue mod p".into()))
        }
    }

    /// Uniform exponent in `[1, q - 1]`.
    pub fn random_exponent(&self, rng: &mut Rng) -> BigUint {
        let bound = &self.q - 1u32;
        let bytes = (bound.bits() as usize).div_ceil(8);
        let excess = bytes * 8 - bound.bits() as usize;
        let mut buf = vec![0u8; bytes];
        loop {
            rng.fill_bytes(&mut buf);
            buf[0] &= 0xff >> excess;
            let x = BigUint::from_bytes_be(&buf);
            if x < bound {
                return x + 1u32;
            }
        }
    }

    fn check_exponent(&self, e: &BigUint) -> Result<()> {
        if e.is_zero() || e >= &self.q {
            Err(Error::arg("exponent outside [1, q-1]"))
        } else {
            Ok(())
        }
    }

    /// `x^e mod p`.
    pub fn pow(&self, x: &GroupElement, e: &BigUint) -> GroupElement {
        GroupElement(x.0.modpow(e, &self.p))
    }

    /// `a * b mod q`, for combining exponents.
    pub fn mul_exp(&self, a: &BigUint, b: &BigUint) -> BigUint {
        (a * b) % &self.q
    }

    pub fn encode(&self, x: &GroupElement) -> Vec<u8> {
        let raw = x.0.to_bytes_be();
        let mut out = vec![0u8; self.width - raw.len()];
        out.extend_from_slice(&raw);
        out
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<GroupElement> {
        if bytes.len() != self.width {
            return Err(Error::Protocol(format!(
                "element encoding has {} bytes, expected {}",
                bytes.len(),
                self.width
            )));
        }
        self.element(BigUint::from_bytes_be(bytes))
    }
}

/// A member of `QR(Z_p*)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(pub(crate) BigUint);

impl GroupElement {
    pub fn value(&self) -> &BigUint {
        &self.0
    }
}

/// SHA-256 of the id, reduced into `[1, p - 1]` and squared. A zero result
/// is re-hashed with a counter suffix.
pub fn hash_to_group(id: &[u8], params: &GroupParams) -> Result<GroupElement> {
    if id.is_empty() {
        return Err(Error::arg("empty id"));
    }
    let pm1 = params.p() - 1u32;
    let mut counter: u32 = 0;
    loop {
        let mut h = Sha256::new();
        h.update(id);
        if counter > 0 {
            h.update(counter.to_be_bytes());
        }
        let digest = BigUint::from_bytes_be(&h.finalize());
        let x = (digest % &pm1) + 1u32;
        let sq = (&x * &x) % params.p();
        if !sq.is_zero() {
            return Ok(GroupElement(sq));
        }
        counter += 1;
    }
}

/// Raise every element to `exponent` and return them in a uniformly random
/// order.
pub fn exp_shuffle(
    elements: &[GroupElement],
    exponent: &BigUint,
    params: &GroupParams,
    rng: &mut Rng,
) -> Result<Vec<GroupElement>> {
    params.check_exponent(exponent)?;
    let mut out: Vec<GroupElement> = elements.iter().map(|x| params.pow(x, exponent)).collect();
    rng.shuffle(&mut out);
    Ok(out)
}

/// One party's three secret exponents.
#[derive(Clone, PartialEq, Eq)]
pub struct PartySecrets {
    pub e1: BigUint,
    pub e2: BigUint,
    pub e3: BigUint,
}

impl fmt::Debug for PartySecrets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PartySecrets(..)")
    }
}

impl PartySecrets {
    pub fn random(params: &GroupParams, rng: &mut Rng) -> Self {
        Self {
            e1: params.random_exponent(rng),
            e2: params.random_exponent(rng),
            e3: params.random_exponent(rng),
        }
    }

    pub fn new(params: &GroupParams, e1: BigUint, e2: BigUint, e3: BigUint) -> Result<Self> {
        for e in [&e1, &e2, &e3] {
            params.check_exponent(e)?;
        }
        Ok(Self { e1, e2, e3 })
    }
}

/// Jacobi symbol `(a / n)` for odd `n`.
pub fn jacobi(a: &BigUint, n: &BigUint) -> i32 {
    let mut a = a % n;
    let mut n = n.clone();
    let mut sign = 1;
    while !a.is_zero() {
        let tz = a.trailing_zeros().unwrap_or(0);
        a >>= tz;
        let n8 = n.iter_u32_digits().next().unwrap_or(0) & 7;
        if tz % 2 == 1 && (n8 == 3 || n8 == 5) {
            sign = -sign;
        }
        std::mem::swap(&mut a, &mut n);
        let a4 = a.iter_u32_digits().next().unwrap_or(0) & 3;
        let n4 = n.iter_u32_digits().next().unwrap_or(0) & 3;
        if a4 == 3 && n4 == 3 {
            sign = -sign;
        }
        a %= &n;
    }
    if n.is_one() {
        sign
    } else {
        0
    }
}

/// Miller-Rabin with `rounds` random bases.
pub fn is_probable_prime(n: &BigUint, rounds: usize, rng: &mut Rng) -> bool {
    let two = BigUint::from(2u32);
    if n < &two {
        return false;
    }
    for sp in [2u32, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let sp = BigUint::from(sp);
        if n == &sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let nm1 = n - 1u32;
    let s = nm1.trailing_zeros().unwrap_or(0);
    let d = &nm1 >> s;
    let bytes = (n.bits() as usize).div_ceil(8);
    let mut buf = vec![0u8; bytes];
    'witness: for _ in 0..rounds {
        rng.fill_bytes(&mut buf);
        let a = BigUint::from_bytes_be(&buf).mod_floor(&(n - 3u32)) + 2u32;
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == nm1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == nm1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_groups_are_safe_primes() {
        let mut rng = Rng::new(1);
        for g in [GroupParams::toy(), GroupParams::safe128(), GroupParams::modp2048()] {
            assert!(is_probable_prime(g.p(), 16, &mut rng), "{g:?}");
            assert!(is_probable_prime(g.q(), 16, &mut rng), "{g:?}");
        }
        assert_eq!(GroupParams::modp2048().width(), 256);
        assert_eq!(GroupParams::toy().q(), &BigUint::from(11u32));
        assert!(GroupParams::new(BigUint::from(29u32)).is_err());
        assert!(GroupParams::new(BigUint::from(47u32)).is_ok());
    }

    #[test]
    fn hashes_are_residues() {
        let g = GroupParams::toy();
        for i in 0..1000u32 {
            let x = hash_to_group(&i.to_be_bytes(), &g).unwrap();
            assert!(g.euler_check(x.value()));
        }
        assert_eq!(hash_to_group(b"id", &g).unwrap(), hash_to_group(b"id", &g).unwrap());
        assert!(hash_to_group(b"", &g).is_err());
    }

    #[test]
    fn jacobi_matches_euler() {
        let g = GroupParams::toy();
        for x in 1u32..23 {
            let x = BigUint::from(x);
            assert_eq!(g.is_member(&x), g.euler_check(&x), "{x}");
        }
        let g = GroupParams::modp2048();
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let x = g.random_exponent(&mut rng);
            assert_eq!(g.is_member(&x), g.euler_check(&x));
        }
    }

    #[test]
    fn exponent_laws() {
        let g = GroupParams::toy();
        let mut rng = Rng::new(5);
        for i in 0..50u32 {
            let x = hash_to_group(&i.to_le_bytes(), &g).unwrap();
            let a = g.random_exponent(&mut rng);
            let b = g.random_exponent(&mut rng);
            assert_eq!(g.pow(&g.pow(&x, &a), &b), g.pow(&g.pow(&x, &b), &a));
            assert_eq!(g.pow(&x, &a), g.pow(&x, &(&a + g.q())));
            assert!(a >= BigUint::one() && &a < g.q());
        }
    }

    #[test]
    fn shuffle_preserves_multiset() {
        let g = GroupParams::safe128();
        let mut rng = Rng::new(2);
        let xs: Vec<_> = (0..20u32).map(|i| hash_to_group(&i.to_be_bytes(), &g).unwrap()).collect();
        let mut ys = exp_shuffle(&xs, &BigUint::one(), &g, &mut rng).unwrap();
        let mut sorted = xs.clone();
        sorted.sort();
        ys.sort();
        assert_eq!(ys, sorted);
        assert!(exp_shuffle(&xs, &BigUint::zero(), &g, &mut rng).is_err());
        assert!(exp_shuffle(&xs, g.q(), &g, &mut rng).is_err());
    }

    #[test]
    fn encoding_round_trip() {
        let g = GroupParams::modp2048();
        let x = hash_to_group(b"abc", &g).unwrap();
        let e = g.encode(&x);
        assert_eq!(e.len(), 256);
        assert_eq!(g.decode(&e).unwrap(), x);
        assert!(g.decode(&e[1..]).is_err());
    }
}
