"""Offline-trained weights (regressor, identifier, pyramid fusion) and their npz storage."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .crac import IdentifierModel, RegressorModel
from .nn import HeadParams
from .tensor import DenseLayerParams


@dataclass(frozen=True, eq=False)
class ModelBundle:
    regressor: RegressorModel
    identifier: IdentifierModel
    pooling: str  # "proialign" or "roialign"
    fusion: DenseLayerParams | None = None  # pyramid level fusion; None for plain pooling
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        arrays = {}
        for name, model in (("reg", self.regressor), ("ide", self.identifier)):
            for i, a in enumerate(model.head.arrays()):
                arrays[f"{name}_{i}"] = a.astype(np.float32)
        if self.fusion is not None:
            arrays["fusion_w"] = self.fusion.weights[:, :, 0, 0]
            arrays["fusion_b"] = self.fusion.bias
        meta = dict(self.meta, pooling=self.pooling)
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez_compressed(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            heads = {}
            for name in ("reg", "ide"):
                arr = [z[f"{name}_{i}"].astype(np.float64) for i in range(sum(k.startswith(name + "_") for k in z.files))]
                n_fc = (len(arr) - 2) // 2
                heads[name] = HeadParams(arr[0], arr[1], arr[2::2][:n_fc], arr[3::2][:n_fc])
            fusion = DenseLayerParams.conv1x1(z["fusion_w"], z["fusion_b"]) if "fusion_w" in z.files else None
        pooling = meta.pop("pooling")
        return cls(
            RegressorModel.from_head(heads["reg"]),
            IdentifierModel.from_head(heads["ide"]),
            pooling,
            fusion,
            meta,
        )


def builtin_path(pooling: str) -> Path:
    return Path(str(resources.files("cascadetrack") / "data" / f"models_{pooling}.npz"))


def load_models(pooling: str = "proialign", source: str = "builtin") -> ModelBundle:
    path = builtin_path(pooling) if source == "builtin" else Path(source)
    if not path.exists():
        raise FileNotFoundError(f"no weights at {path}; run `cascadetrack pretrain` to create them")
    bundle = ModelBundle.load(path)
    if bundle.pooling != pooling:
        raise ValueError(f"weights at {path} were trained for {bundle.pooling} pooling, not {pooling}")
    return bundle
