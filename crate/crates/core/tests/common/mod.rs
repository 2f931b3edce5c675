#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regulus_core::keys::derive_signing_key;
use regulus_core::ledger::{verify_proof, BehaviorRecord, Hash32, Ledger, Payload, RecordFilter, RecordKind};

pub const AGENTS: [&str; 6] = ["ana", "bo", "cy", "dee", "eli", "fay"];

/// `n` signed records from [`AGENTS`], sealed in blocks of 1..=40 records,
/// one block per epoch; the last `pending` records stay unsealed.
pub fn random_ledger(seed: u64, n: usize, pending: usize) -> Ledger {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<_> = AGENTS.iter().map(|a| derive_signing_key(seed, a)).collect();
    let mut ledger = Ledger::new();
    for (a, k) in AGENTS.iter().zip(&keys) {
        ledger.register_key(a, k.verifying_key()).unwrap();
    }
    let sealed = n - pending;
    let (mut epoch, mut in_block, mut block_size) = (0u64, 0, rng.random_range(1..=40));
    for i in 0..n {
        let a = rng.random_range(0..AGENTS.len());
        let kind = *RecordKind::ALL.choose(&mut rng).unwrap();
        let payload = Payload::new().with("n", i).with("v", rng.random::<u32>());
        let r = BehaviorRecord::signed(&keys[a], AGENTS[a], epoch, kind, &payload, i as u64);
        ledger.append_record(r).unwrap();
        in_block += 1;
        if i < sealed && (in_block == block_size || i + 1 == sealed) {
            ledger.seal_block(epoch).unwrap();
            epoch += 1;
            in_block = 0;
            block_size = rng.random_range(1..=40);
        }
    }
    ledger
}

/// A stored record checks out when its content hashes to its id and that id
/// proves into its block's root.
pub fn record_verifies(ledger: &Ledger, key: &Hash32) -> bool {
    let (Some(r), Some(block), Ok(proof)) = (ledger.get(key), ledger.block_of(key), ledger.prove_inclusion(key)) else {
        return false;
    };
    r.compute_id() == r.record_id && verify_proof(&r.record_id, &proof, &block.merkle_root)
}

pub const RECORD_FIELDS: usize = 7;

fn flip(bytes: &mut [u8], bit: usize) {
    let bit = bit % (bytes.len() * 8);
    bytes[bit / 8] ^= 1 << (bit % 8);
}

/// Flip one bit of field `field` of `r`. Agent ids flip within ASCII, kinds
/// move to another kind.
pub fn tamper_record(r: &mut BehaviorRecord, field: usize, bit: usize) {
    match field % RECORD_FIELDS {
        0 => {
            let mut b = r.agent_id.clone().into_bytes();
            let i = bit % b.len();
            b[i] ^= 1 << (bit % 7);
            r.agent_id = String::from_utf8(b).expect("still ascii");
        }
        1 => r.epoch ^= 1 << (bit % 64),
        2 => {
            let i = RecordKind::ALL.iter().position(|k| *k == r.kind).unwrap();
            r.kind = RecordKind::ALL[(i + 1 + bit % 6) % 7];
        }
        3 => flip(&mut r.payload, bit),
        4 => r.timestamp ^= 1 << (bit % 64),
        5 => flip(&mut r.signature, bit),
        _ => flip(&mut r.record_id.0, bit),
    }
}

pub const BLOCK_FIELDS: usize = 6;

/// Flip one bit of a block header field or of one listed record id.
pub fn tamper_block(ledger: &mut Ledger, height: u64, field: usize, bit: usize) {
    let b = ledger.storage_block_mut(height).unwrap();
    match field % BLOCK_FIELDS {
        0 => b.height ^= 1 << (bit % 64),
        1 => flip(&mut b.prev_hash.0, bit),
        2 => flip(&mut b.merkle_root.0, bit),
        3 => b.epoch ^= 1 << (bit % 64),
        4 => flip(&mut b.header_hash.0, bit),
        _ => {
            let n = b.record_ids.len();
            flip(&mut b.record_ids[bit % n].0, bit / n);
        }
    }
}

pub fn random_filter(rng: &mut impl Rng, max_epoch: u64) -> RecordFilter {
    let mut f = RecordFilter::default();
    if rng.random_bool(0.6) {
        f = f.agent(*AGENTS.choose(rng).unwrap());
    }
    if rng.random_bool(0.6) {
        let a = rng.random_range(0..=max_epoch + 2);
        let b = rng.random_range(a..=max_epoch + 2);
        f = f.epochs(a..=b);
    }
    if rng.random_bool(0.5) {
        f = f.kind(*RecordKind::ALL.choose(rng).unwrap());
    }
    f
}

/// Sealed records matching `f`, by linear scan.
pub fn brute_force_query(ledger: &Ledger, f: &RecordFilter) -> Vec<Hash32> {
    ledger
        .records()
        .filter(|r| ledger.is_sealed(&r.record_id) && f.matches(r))
        .map(|r| r.record_id)
        .collect()
}
