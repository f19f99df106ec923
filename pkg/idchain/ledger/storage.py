"""Persisted ledger format and ledger stores.

A persisted ledger is UTF-8 text: one JSON header line, one hex line holding the
encoded channel config, then one hex line per block in height order.
"""

import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import BinaryIO, Union

from idchain.core.config import settings
from idchain.exceptions import LedgerParseError
from idchain.ledger.chain import Ledger
from idchain.ledger.codec import (
    decode_block,
    decode_config,
    encode_block,
    encode_config,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

LEDGER_FORMAT = "idchain-ledger"


def _header(channel_id: str) -> str:
    return json.dumps(
        {
            "format": LEDGER_FORMAT,
            "version": settings.LEDGER_FORMAT_VERSION,
            "channel_id": channel_id,
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def dumps(ledger: Ledger) -> bytes:
    lines = [_header(ledger.config.channel_id), encode_config(ledger.config).hex()]
    lines += [encode_block(block).hex() for block in ledger.blocks]
    return ("\n".join(lines) + "\n").encode("ascii")


def _unhex(line: str, what: str, height=None) -> bytes:
    try:
        data = bytes.fromhex(line)
    except ValueError:
        raise LedgerParseError(f"{what} is not valid hex", height)
    if line != data.hex():
        raise LedgerParseError(f"{what} is not canonical lowercase hex", height)
    return data


def loads(data: bytes) -> Ledger:
    """Parse a persisted ledger. Structural problems raise LedgerParseError.

    Parsing does not check hashes or endorsements; call `verify_chain` for that.
    """
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        raise LedgerParseError("ledger is not ASCII text")
    lines = text.split("\n")
    complete = lines[-1] == ""
    if complete:
        lines.pop()
    if len(lines) < 3:
        raise LedgerParseError("ledger needs a header, a config and a genesis block")

    header_line, config_line, block_lines = lines[0], lines[1], lines[2:]
    try:
        header = json.loads(header_line)
    except ValueError:
        raise LedgerParseError("header line is not JSON")
    if not isinstance(header, dict) or header.get("format") != LEDGER_FORMAT:
        raise LedgerParseError("not an idchain ledger")
    if header.get("version") != settings.LEDGER_FORMAT_VERSION:
        raise LedgerParseError(f"unsupported ledger version {header.get('version')}")
    if not isinstance(header.get("channel_id"), str):
        raise LedgerParseError("header has no channel id")
    if header_line != _header(header["channel_id"]):
        raise LedgerParseError("header line is not canonical")

    try:
        config = decode_config(_unhex(config_line, "config line"))
    except LedgerParseError:
        raise
    except ValueError as e:
        raise LedgerParseError(f"bad channel config: {e}")
    if config.channel_id != header["channel_id"]:
        raise LedgerParseError("header channel id does not match the config")

    blocks = []
    for height, line in enumerate(block_lines):
        try:
            block = decode_block(_unhex(line, "block line", height))
        except LedgerParseError:
            raise
        except ValueError as e:
            raise LedgerParseError(f"bad block: {e}", height)
        if block.height != height:
            raise LedgerParseError(f"block claims height {block.height}", height)
        blocks.append(block)
    if not complete:
        raise LedgerParseError("ledger is truncated (missing final newline)", height)
    return Ledger(config, blocks)


def persist(ledger: Ledger, sink: Union[str, Path, BinaryIO]) -> None:
    data = dumps(ledger)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)


def load(source: Union[str, Path, BinaryIO]) -> Ledger:
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    else:
        data = source.read()
    return loads(data)


class LedgerStore(ABC):
    """Abstract base class for ledger stores."""

    @abstractmethod
    def save(self, ledger: Ledger) -> None:
        pass

    @abstractmethod
    def open(self, channel_id: str) -> Ledger:
        pass

    @abstractmethod
    def raw(self, channel_id: str) -> bytes:
        pass

    @abstractmethod
    def list_channels(self) -> list[str]:
        pass


class FileLedgerStore(LedgerStore):
    """Stores each channel as `<root_dir>/<channel_id>.ledger`."""

    suffix = ".ledger"

    def __init__(self, root_dir: Union[str, Path, None] = None):
        self.root_dir = Path(root_dir or settings.OUTPUT_DIR)
        logger.info(f"Creating file ledger store at {self.root_dir}")

    def path_for(self, channel_id: str) -> Path:
        return self.root_dir / f"{channel_id}{self.suffix}"

    def save(self, ledger: Ledger) -> None:
        self.root_dir.mkdir(parents=True, exist_ok=True)
        path = self.path_for(ledger.config.channel_id)
        persist(ledger, path)
        logger.info(f"Saved ledger '{ledger.config.channel_id}' to {path}")

    def open(self, channel_id: str) -> Ledger:
        return load(self.path_for(channel_id))

    def raw(self, channel_id: str) -> bytes:
        return self.path_for(channel_id).read_bytes()

    def list_channels(self) -> list[str]:
        if not self.root_dir.exists():
            return []
        return sorted(p.stem for p in self.root_dir.glob(f"*{self.suffix}"))


class MemoryLedgerStore(LedgerStore):
    def __init__(self):
        self._data: dict[str, bytes] = {}
        logger.info("Creating in-memory ledger store")

    def save(self, ledger: Ledger) -> None:
        self._data[ledger.config.channel_id] = dumps(ledger)

    def open(self, channel_id: str) -> Ledger:
        try:
            return loads(self._data[channel_id])
        except KeyError:
            raise LedgerParseError(f"No ledger stored for channel '{channel_id}'")

    def raw(self, channel_id: str) -> bytes:
        return self._data[channel_id]

    def list_channels(self) -> list[str]:
        return sorted(self._data)
