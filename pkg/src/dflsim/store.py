"""Content-addressed blob store shared by all simulated nodes."""

from __future__ import annotations

from typing import Optional

from .codec import decode, encode
from .fl import ModelParams
from .identity import Digest, digest


class ContentStore:
    def __init__(self) -> None:
        self._blobs: dict[Digest, bytes] = {}
        self._models: dict[Digest, ModelParams] = {}

    def put(self, data: bytes) -> Digest:
        key = digest(data)
        self._blobs.setdefault(key, data)
        return key

    def get(self, key: Digest) -> Optional[bytes]:
        return self._blobs.get(key)

    def __contains__(self, key: object) -> bool:
        return key in self._blobs

    def put_model(self, params: ModelParams) -> Digest:
        key = self.put(encode(params))
        self._models.setdefault(key, params)
        return key

    def get_model(self, key: Digest) -> Optional[ModelParams]:
        cached = self._models.get(key)
        if cached is not None:
            return cached
        raw = self._blobs.get(key)
        if raw is None:
            return None
        params = decode(raw)
        if not isinstance(params, ModelParams):
            raise TypeError("blob is not a model")
        self._models[key] = params
        return params
