"""App packages: zip archives carrying on-device models and a manifest.

``manifest.json`` schema::

    {"app_id": str,
     "models": [{"entry": str, "labels": str | null}],
     "encrypted_models": [{"entry": str, "key_id": str}],
     "keys": {key_id: hex str},
     "sealed": bool}

Encrypted entries use a SHA-256 counter-mode keystream: block ``i`` is
``sha256(key || u64le(i))`` and is XORed with the plaintext.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zipfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import (
    CorruptEntry,
    DecryptionFailed,
    EntryMissing,
    MissingManifest,
    NotAnArchive,
    SealedPackage,
    UnknownKey,
)
from .model_format import MAGIC, parse_model

MANIFEST = "manifest.json"
MODEL_EXTENSIONS = (".tflite", ".lite", ".sdlm")
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass(frozen=True, eq=False)
class AppPackage:
    path: Optional[Path]
    entries: tuple[tuple[str, bytes], ...]
    manifest: dict = field(repr=False)
    compression: tuple[int, ...] = field(default=(), repr=False)

    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def read(self, name: str) -> bytes:
        for entry, data in self.entries:
            if entry == name:
                return data
        raise EntryMissing(f"no entry {name!r} in package")


@dataclass(frozen=True)
class ModelLocator:
    entry_name: str
    encrypted: bool = False
    key_id: Optional[str] = None


@dataclass(frozen=True)
class LabelFile:
    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.labels:
            raise ValueError("label file is empty")

    @classmethod
    def parse(cls, text: Union[str, bytes]) -> "LabelFile":
        if isinstance(text, bytes):
            text = text.decode("utf-8")
        return cls(tuple(text.splitlines()))

    def dump(self) -> str:
        return "".join(label + "\n" for label in self.labels)


# -- cipher ----------------------------------------------------------------

def keystream(key: bytes, n: int) -> bytes:
    blocks = (n + 31) // 32
    return b"".join(hashlib.sha256(key + struct.pack("<Q", i)).digest() for i in range(blocks))[:n]


def xor_cipher(key: bytes, data: bytes) -> bytes:
    """Encrypt or decrypt (the operation is its own inverse)."""
    ks = np.frombuffer(keystream(key, len(data)), dtype=np.uint8)
    return (np.frombuffer(data, dtype=np.uint8) ^ ks).tobytes()


def _key(pkg: AppPackage, key_id: Optional[str]) -> bytes:
    keys = pkg.manifest.get("keys") or {}
    if key_id not in keys:
        raise UnknownKey(f"key {key_id!r} is not in the manifest")
    return bytes.fromhex(keys[key_id])


# -- archive i/o -----------------------------------------------------------

def encode_package(entries, compression=None) -> bytes:
    """Deterministic zip bytes: fixed timestamps, entry order preserved."""
    entries = list(entries)
    compression = list(compression or [zipfile.ZIP_DEFLATED] * len(entries))
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for (name, data), method in zip(entries, compression):
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.compress_type = method
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    return buf.getvalue()


def package_from_bytes(data: bytes, path=None) -> AppPackage:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise NotAnArchive(f"{path or 'package'}: {exc}") from None
    entries, methods = [], []
    with zf:
        seen = set()
        for info in zf.infolist():
            if info.is_dir():
                continue
            if info.filename in seen:
                raise CorruptEntry(f"duplicate entry {info.filename!r}")
            seen.add(info.filename)
            try:
                entries.append((info.filename, zf.read(info)))
            except (zipfile.BadZipFile, zlib.error) as exc:
                raise CorruptEntry(f"{info.filename}: {exc}") from None
            methods.append(info.compress_type)
    names = [n for n, _ in entries]
    if MANIFEST not in names:
        raise MissingManifest(f"{path or 'package'} has no {MANIFEST}")
    try:
        manifest = json.loads(dict(entries)[MANIFEST].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptEntry(f"{MANIFEST}: {exc}") from None
    return AppPackage(Path(path) if path else None, tuple(entries), manifest, tuple(methods))


def open_package(path) -> AppPackage:
    path = Path(path)
    data = path.read_bytes()
    if not zipfile.is_zipfile(io.BytesIO(data)):
        raise NotAnArchive(f"{path} is not a zip archive")
    return package_from_bytes(data, path)


def package_bytes(pkg: AppPackage) -> bytes:
    return encode_package(pkg.entries, pkg.compression or None)


def save_package(pkg: AppPackage, path) -> Path:
    path = Path(path)
    path.write_bytes(package_bytes(pkg))
    return path


def build_package(app_id: str, files: dict, labels: Optional[dict] = None,
                  encrypt: Optional[dict] = None, sealed: bool = False) -> AppPackage:
    """Assemble a package from plaintext files.

    ``labels`` maps model entry -> label entry; ``encrypt`` maps model entry ->
    (key_id, key bytes), and those entries are stored encrypted.
    """
    labels = labels or {}
    encrypt = encrypt or {}
    manifest = {
        "app_id": app_id,
        "models": [{"entry": name, "labels": labels.get(name)}
                   for name in files if is_model_name(name)],
        "encrypted_models": [{"entry": name, "key_id": kid} for name, (kid, _) in encrypt.items()],
        "keys": {kid: key.hex() for kid, key in encrypt.values()},
        "sealed": sealed,
    }
    entries = [(MANIFEST, json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))]
    for name, data in files.items():
        if name in encrypt:
            data = xor_cipher(encrypt[name][1], data)
        entries.append((name, bytes(data)))
    return AppPackage(None, tuple(entries), manifest, tuple([zipfile.ZIP_DEFLATED] * len(entries)))


# -- model discovery -------------------------------------------------------

def is_model_name(name: str) -> bool:
    return name.lower().endswith(MODEL_EXTENSIONS)


def scan_models(pkg: AppPackage) -> list[ModelLocator]:
    encrypted = {e["entry"]: e["key_id"] for e in pkg.manifest.get("encrypted_models") or []}
    return [ModelLocator(name, name in encrypted, encrypted.get(name))
            for name in pkg.names() if is_model_name(name)]


def extract_model(pkg: AppPackage, loc: ModelLocator) -> bytes:
    data = pkg.read(loc.entry_name)
    if not loc.encrypted:
        return data
    plain = xor_cipher(_key(pkg, loc.key_id), data)
    if plain[:4] != MAGIC:
        raise DecryptionFailed(f"{loc.entry_name}: decrypted bytes lack the model magic")
    return plain


def read_labels(pkg: AppPackage, loc: ModelLocator) -> Optional[LabelFile]:
    """Label file bound to the model through the manifest, if any."""
    for m in pkg.manifest.get("models") or []:
        if m.get("entry") == loc.entry_name and m.get("labels"):
            return LabelFile.parse(pkg.read(m["labels"]))
    return None


def repack_package(pkg: AppPackage, loc: ModelLocator, new_model: bytes) -> AppPackage:
    """Copy of ``pkg`` with the located model replaced; other entries untouched."""
    if pkg.manifest.get("sealed"):
        raise SealedPackage(f"{pkg.manifest.get('app_id', 'package')} is sealed against repackaging")
    parse_model(new_model)
    pkg.read(loc.entry_name)
    stored = xor_cipher(_key(pkg, loc.key_id), new_model) if loc.encrypted else bytes(new_model)
    entries = tuple((name, stored if name == loc.entry_name else data) for name, data in pkg.entries)
    return AppPackage(None, entries, pkg.manifest, pkg.compression)
