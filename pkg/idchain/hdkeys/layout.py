"""Fixed subtree layout of a user's two key trees.

    Data Access root (A)          m
      owner key for owner d       m/d'          registered with the data owner
        transaction key j         m/d'/j        minted by the data owner
    Data Authorization root (B)   m
      IDP key for IDP p           m/p'          registered with the IDP
        login key i               m/p'/i
"""

import hashlib
import hmac
from typing import Optional, Union

from idchain.hdkeys.keys import (
    ExtendedPrivateKey,
    ExtendedPublicKey,
    Mode,
    ckd_priv,
    ckd_pub,
    master_from_seed,
    neuter,
)

DATA_ACCESS_DOMAIN = b"idchain data access"
DATA_AUTHORIZATION_DOMAIN = b"idchain data authorization"


class KeyLayout:
    @staticmethod
    def owner_key(data_access_root: ExtendedPrivateKey, owner_index: int):
        return ckd_priv(data_access_root, owner_index, hardened=True)

    @staticmethod
    def transaction_key(
        owner_key: Union[ExtendedPrivateKey, ExtendedPublicKey], counter: int
    ):
        if isinstance(owner_key, ExtendedPrivateKey):
            return ckd_priv(owner_key, counter)
        return ckd_pub(owner_key, counter)

    @staticmethod
    def idp_key(data_authorization_root: ExtendedPrivateKey, idp_index: int):
        return ckd_priv(data_authorization_root, idp_index, hardened=True)

    @staticmethod
    def login_key(
        idp_key: Union[ExtendedPrivateKey, ExtendedPublicKey], login_index: int
    ):
        if isinstance(idp_key, ExtendedPrivateKey):
            return ckd_priv(idp_key, login_index)
        return ckd_pub(idp_key, login_index)


def _domain_seed(domain: bytes, seed: bytes) -> bytes:
    return hmac.new(domain, seed, hashlib.sha512).digest()[:32]


class UserKeyring:
    """The two master roots of a user, derived from one seed."""

    def __init__(
        self,
        data_access_root: ExtendedPrivateKey,
        data_authorization_root: ExtendedPrivateKey,
    ):
        self.data_access_root = data_access_root
        self.data_authorization_root = data_authorization_root

    @classmethod
    def from_seed(
        cls, seed: bytes, mode: Optional[Union[Mode, str]] = None
    ) -> "UserKeyring":
        return cls(
            data_access_root=master_from_seed(
                _domain_seed(DATA_ACCESS_DOMAIN, seed), mode
            ),
            data_authorization_root=master_from_seed(
                _domain_seed(DATA_AUTHORIZATION_DOMAIN, seed), mode
            ),
        )

    @property
    def mode(self) -> Mode:
        return self.data_access_root.mode

    def owner_key(self, owner_index: int) -> ExtendedPrivateKey:
        return KeyLayout.owner_key(self.data_access_root, owner_index)

    def owner_xpub(self, owner_index: int) -> ExtendedPublicKey:
        return neuter(self.owner_key(owner_index))

    def transaction_key(self, owner_index: int, counter: int) -> ExtendedPrivateKey:
        return KeyLayout.transaction_key(self.owner_key(owner_index), counter)

    def idp_key(self, idp_index: int) -> ExtendedPrivateKey:
        return KeyLayout.idp_key(self.data_authorization_root, idp_index)

    def idp_xpub(self, idp_index: int) -> ExtendedPublicKey:
        return neuter(self.idp_key(idp_index))

    def login_key(self, idp_index: int, login_index: int) -> ExtendedPrivateKey:
        return KeyLayout.login_key(self.idp_key(idp_index), login_index)

    def __repr__(self) -> str:
        return (
            f"<UserKeyring(mode={self.mode.value}, "
            f"data_access={self.data_access_root.fingerprint().hex()}, "
            f"data_authorization={self.data_authorization_root.fingerprint().hex()})>"
        )
