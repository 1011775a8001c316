#![no_main]

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use zed::codec::{decode, Bitstream};
use zed::net::init_weights;
use zed::{ModelWeights, NetConfig};

fn weights() -> &'static ModelWeights {
    static W: OnceLock<ModelWeights> = OnceLock::new();
    W.get_or_init(|| init_weights(NetConfig::tiny(), 0).unwrap())
}

fuzz_target!(|data: &[u8]| {
    let Ok(mut bs) = Bitstream::from_bytes(data) else {
        return;
    };
    assert_eq!(bs.to_bytes(), data);
    if bs.width * bs.height > 64 * 64 {
        return;
    }
    bs.digest = weights().digest();
    let _ = decode(&bs, weights());
});
