from idchain.hdkeys.keys import (
    HARDENED_OFFSET,
    DerivationPath,
    ExtendedKey,
    ExtendedPrivateKey,
    ExtendedPublicKey,
    Mode,
    PathStep,
    Signature,
    ckd_priv,
    ckd_pub,
    derivation_tweak,
    derive_path,
    master_from_seed,
    neuter,
    parse_extended_key,
    sign,
    verify,
)
from idchain.hdkeys.layout import KeyLayout, UserKeyring
