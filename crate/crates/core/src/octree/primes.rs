//! Large primes for the per-node hash functions.

use std::sync::OnceLock;

/// Number of entries in the shared prime table.
pub const TABLE_LEN: usize = 8192;

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin, exact for every `u64`.
pub fn is_prime(n: u64) -> bool {
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &p in &BASES {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for &a in &BASES {
        let mut x = pow_mod(a, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Smallest prime `>= n`.
pub fn next_prime(n: u64) -> u64 {
    let mut c = n | 1;
    if n <= 2 {
        return 2;
    }
    while !is_prime(c) {
        c += 2;
    }
    c
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Fixed table of odd primes in `(2^31, 2^62)`, identical on every run.
pub fn table() -> &'static [u64] {
    static TABLE: OnceLock<Vec<u64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..TABLE_LEN as u64)
            .map(|i| next_prime((splitmix64(i) >> 2) | (1 << 31) | 1))
            .collect()
    })
}

/// Per-level salt XOR-ed into every hash of that level.
pub fn level_salt(level: usize) -> u64 {
    static SALTS: OnceLock<Vec<u64>> = OnceLock::new();
    let salts = SALTS.get_or_init(|| {
        (0..64u64)
            .map(|l| next_prime((splitmix64(0xA076_1D64_78BD_642F ^ l) >> 2) | (1 << 31)))
            .collect()
    });
    salts[level % salts.len()]
}
