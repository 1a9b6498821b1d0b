"""On-disk format for checkpoint chains.

A chain directory holds ``manifest.txt`` (``key = value`` lines) and one raw
little-endian float64 file per snapshot per network. Each array file is the
network's parameters flattened in the order listed under
``params.flow``/``params.latent`` (name:shape, row-major); its SHA-256 is
recorded in the manifest and checked on load.
"""

from __future__ import annotations

import ast
import hashlib
from pathlib import Path

import numpy as np

from .dataset import RngStream, ScaleParams
from .diffcore import ParamSet
from .flow import CouplingLayer, FlowModel
from .latent import LatentNet
from .trainer import CheckpointChain, Snapshot

FORMAT = "flowimpute-chain"
VERSION = 1
MANIFEST = "manifest.txt"


class ChainFormatError(ValueError):
    """Missing, malformed or tampered checkpoint files."""


def _floats(a) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(a))


def _parse_floats(s: str) -> np.ndarray:
    return np.array([float(v) for v in s.split(",")]) if s else np.zeros(0)


def _layout(params: ParamSet) -> str:
    return ";".join(f"{k}:{'x'.join(map(str, v.shape)) or '1'}" for k, v in params.items())


def _parse_layout(s: str) -> dict[str, tuple[int, ...]]:
    out = {}
    for item in s.split(";"):
        name, shape = item.split(":")
        out[name] = tuple(int(d) for d in shape.split("x"))
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_array(path: Path, params: ParamSet) -> None:
    path.write_bytes(params.flatten().astype("<f8").tobytes())


def _read_array(path: Path, layout: dict[str, tuple[int, ...]]) -> ParamSet:
    flat = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
    template = ParamSet({k: np.zeros(s) for k, s in layout.items()})
    if flat.size != template.size:
        raise ChainFormatError(f"{path.name}: holds {flat.size} values, expected {template.size}")
    return template.unflatten(flat)


def save_chain(chain: CheckpointChain, outdir) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if not chain.snapshots:
        raise ValueError("refusing to save an empty chain")
    first = chain.snapshots[0]
    lines = [
        ("format", FORMAT),
        ("version", str(VERSION)),
        ("n", str(chain.n)),
        ("hidden", str(chain.hidden)),
        ("n_layers", str(len(chain.partitions))),
    ]
    lines += [(f"partition.{i}", "".join("1" if b else "0" for b in d)) for i, d in enumerate(chain.partitions)]
    lines += [
        ("scale.mode", chain.scale.mode),
        ("scale.min", _floats(chain.scale.minimum)),
        ("scale.max", _floats(chain.scale.maximum)),
        ("initializer", chain.initializer),
        ("seed", str(chain.seed)),
        ("grid_shape", "x".join(map(str, chain.grid_shape)) if chain.grid_shape else "none"),
        ("snapshot_epochs", ",".join(str(e) for e in chain.epochs)),
        ("params.flow", _layout(first.theta)),
        ("params.latent", _layout(first.phi)),
    ]
    for snap in chain.snapshots:
        for tag, params in (("flow", snap.theta), ("latent", snap.phi)):
            fname = f"{tag}_{snap.epoch:06d}.f64"
            _write_array(outdir / fname, params)
            lines.append((f"file.{tag}.{snap.epoch}", fname))
            lines.append((f"sha256.{fname}", _sha256(outdir / fname)))
    lines += [(f"config.{k}", repr(v)) for k, v in sorted(chain.config.items())]
    path = outdir / MANIFEST
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines))
    return path


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ChainFormatError(f"{path}: manifest not found")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if " = " not in line:
            raise ChainFormatError(f"{path}: malformed line {lineno}")
        k, v = line.split(" = ", 1)
        out[k.strip()] = v.strip()
    return out


def load_chain(chaindir) -> CheckpointChain:
    chaindir = Path(chaindir)
    meta = read_manifest(chaindir / MANIFEST)
    try:
        if meta["format"] != FORMAT:
            raise ChainFormatError(f"{chaindir}: not a checkpoint chain (format={meta['format']!r})")
        if int(meta["version"]) != VERSION:
            raise ChainFormatError(f"{chaindir}: unsupported chain version {meta['version']}")
        n, hidden = int(meta["n"]), int(meta["hidden"])
        partitions = [np.array([c == "1" for c in meta[f"partition.{i}"]]) for i in range(int(meta["n_layers"]))]
        scale = ScaleParams(_parse_floats(meta["scale.min"]), _parse_floats(meta["scale.max"]), meta["scale.mode"])
        grid = None if meta["grid_shape"] == "none" else tuple(int(g) for g in meta["grid_shape"].split("x"))
        epochs = [int(e) for e in meta["snapshot_epochs"].split(",") if e]
        layouts = {"flow": _parse_layout(meta["params.flow"]), "latent": _parse_layout(meta["params.latent"])}
        snapshots = []
        for epoch in epochs:
            arrays = {}
            for tag in ("flow", "latent"):
                fname = meta[f"file.{tag}.{epoch}"]
                fpath = chaindir / fname
                if not fpath.is_file():
                    raise ChainFormatError(f"{fpath}: missing array file")
                if _sha256(fpath) != meta[f"sha256.{fname}"]:
                    raise ChainFormatError(f"{fpath}: digest mismatch with manifest")
                arrays[tag] = _read_array(fpath, layouts[tag])
            snapshots.append(Snapshot(epoch, arrays["flow"], arrays["latent"]))
        config = {k[len("config."):]: _literal(v) for k, v in meta.items() if k.startswith("config.")}
        chain = CheckpointChain(n=n, partitions=partitions, hidden=hidden, snapshots=snapshots, scale=scale,
                                initializer=meta["initializer"], seed=int(meta["seed"]), grid_shape=grid,
                                config=config)
    except KeyError as err:
        raise ChainFormatError(f"{chaindir / MANIFEST}: missing key {err.args[0]}") from None
    except ValueError as err:
        if isinstance(err, ChainFormatError):
            raise
        raise ChainFormatError(f"{chaindir / MANIFEST}: {err}") from None
    _validate(chain)
    return chain


def _literal(s: str):
    try:
        return ast.literal_eval(s)
    except (ValueError, SyntaxError):
        return s


def _validate(chain: CheckpointChain) -> None:
    layers = [CouplingLayer(i, d, chain.hidden) for i, d in enumerate(chain.partitions)]
    template = FlowModel(layers, ParamSet())
    expected = template.fresh_params(RngStream(0))
    for snap in chain.snapshots:
        if not snap.theta.same_structure(expected):
            raise ChainFormatError(f"flow parameters of epoch {snap.epoch} do not match the partitions")
        LatentNet(chain.n, snap.phi)
