"""Write-once object store used as the communication medium between peers."""

from __future__ import annotations

import os
import threading
from pathlib import Path


class NotFound(KeyError):
    pass


class AlreadyExists(KeyError):
    pass


def gradient_key(round_idx: int, peer_id: str) -> str:
    return f"gradients/{round_idx:010d}/{peer_id}"


def checkpoint_key(round_idx: int) -> str:
    return f"checkpoints/{round_idx:010d}"


def _check_key(key: str) -> None:
    parts = key.split("/")
    if not key or any(p in ("", ".", "..") for p in parts):
        raise ValueError(f"invalid object key {key!r}")


class BlobStore:
    """In-memory store. Objects are immutable once written; puts to distinct keys are thread-safe."""

    def __init__(self):
        self._objects: dict[str, bytes] = {}
        self._lock = threading.Lock()
        self.total_bytes_written = 0
        self.total_bytes_read = 0

    def put(self, key: str, data: bytes) -> None:
        _check_key(key)
        data = bytes(data)
        with self._lock:
            if key in self._objects:
                raise AlreadyExists(key)
            self._objects[key] = data
            self.total_bytes_written += len(data)

    def get(self, key: str) -> bytes:
        with self._lock:
            try:
                data = self._objects[key]
            except KeyError:
                raise NotFound(key) from None
            self.total_bytes_read += len(data)
        return data

    def exists(self, key: str) -> bool:
        with self._lock:
            return key in self._objects

    def list(self, prefix: str = "") -> list[str]:
        with self._lock:
            return sorted(k for k in self._objects if k.startswith(prefix))

    def size(self, key: str) -> int:
        with self._lock:
            if key not in self._objects:
                raise NotFound(key)
            return len(self._objects[key])


class FileBlobStore(BlobStore):
    """Same contract, one file per key under ``root`` (key segments become directories)."""

    def __init__(self, root: str | os.PathLike):
        super().__init__()
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        _check_key(key)
        return self.root.joinpath(*key.split("/"))

    def put(self, key: str, data: bytes) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = bytes(data)
        try:
            with open(path, "xb") as fh:
                fh.write(data)
        except FileExistsError:
            raise AlreadyExists(key) from None
        with self._lock:
            self.total_bytes_written += len(data)

    def get(self, key: str) -> bytes:
        path = self._path(key)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(key) from None
        with self._lock:
            self.total_bytes_read += len(data)
        return data

    def exists(self, key: str) -> bool:
        return self._path(key).is_file()

    def list(self, prefix: str = "") -> list[str]:
        keys = []
        for p in self.root.rglob("*"):
            if p.is_file():
                key = p.relative_to(self.root).as_posix()
                if key.startswith(prefix):
                    keys.append(key)
        return sorted(keys)

    def size(self, key: str) -> int:
        try:
            return self._path(key).stat().st_size
        except FileNotFoundError:
            raise NotFound(key) from None
