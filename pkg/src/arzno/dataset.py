"""Supervised corpus generation: coupling estimates paired with kernels.

Each family is one closed-loop adaptive run with its own relaxation time
tau; the kernel pairs the controller acquires along the way are snap-
shotted at a fixed cadence together with the estimate that produced
them.  Families are written to separate binary files so generation can
fan out across processes without write contention; a JSON manifest ties
the files together with counts, draws, and a provenance hash.

Record entry layout (little endian):

    [f64 snapshot time][u32 m][f64 x m estimate at mesh nodes]
    [kernel record bytes as written by kernel_record_bytes]
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from arzno.controller import ControllerConfig, run_closed_loop
from arzno.deeponet import KernelDataset
from arzno.kernels import (
    KernelPair,
    TriMesh,
    kernel_pair_from_record,
    kernel_record_bytes,
    record_byte_length,
    solve_kernels,
)
from arzno.model import TrafficParams, derive_linearized
from arzno.sim import GridSpec, InstabilityError

__all__ = [
    "DatasetFormatError",
    "generate",
    "split",
    "load_manifest",
    "iter_family",
    "load_records",
    "verify_labels",
]

log = logging.getLogger(__name__)

_FORMAT = "arzno-dataset"
_VERSION = 1
_ENTRY_HEADER = struct.Struct("<dI")


class DatasetFormatError(ValueError):
    """Raised for malformed manifests or record files."""


def _entry_bytes(m: int) -> int:
    return _ENTRY_HEADER.size + 8 * m + record_byte_length(m)


def _params_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _run_family(args: tuple) -> dict:
    """Generate one family file; executed in a worker process."""
    (idx, tau, p, cfg, g, stride, c_source, out_dir) = args
    p_i = replace(p, tau=tau)
    path = Path(out_dir) / f"family_{idx:03d}.bin"
    entries: list[bytes] = []

    if c_source == "true":
        # Static ground-truth pairs: one solve, repeated per snapshot
        # time so the record count matches the estimate mode.
        lp = derive_linearized(p_i)
        mesh = TriMesh(cfg.mesh_n)
        c_mesh = np.array([lp.c(xx) for xx in mesh.x])
        kp = solve_kernels(
            c_mesh, lp, mesh, tol=cfg.tol, max_iter=cfg.max_iter,
            c_bound=cfg.c_bar,
        )
        record = kernel_record_bytes(kp)
        n_snapshots = (g.n_steps + stride - 1) // stride
        for j in range(n_snapshots):
            t = j * stride * g.dt
            entries.append(
                _ENTRY_HEADER.pack(t, mesh.n) + c_mesh.tobytes() + record
            )
    else:
        counter = {"k": 0}

        def hook(t: float, c_mesh: np.ndarray, kp: KernelPair, ns: int) -> None:
            k = counter["k"]
            counter["k"] = k + 1
            if k % stride:
                return
            entries.append(
                _ENTRY_HEADER.pack(t, c_mesh.size)
                + np.ascontiguousarray(c_mesh, dtype="<f8").tobytes()
                + kernel_record_bytes(kp)
            )

        try:
            run_closed_loop(p_i, cfg, g, on_refresh=hook)
        except InstabilityError as exc:
            return {"family": idx, "tau": tau, "error": str(exc)}

    path.write_bytes(b"".join(entries))
    return {
        "family": idx,
        "tau": tau,
        "path": path.name,
        "n_records": len(entries),
        "entry_bytes": _entry_bytes(cfg.mesh_n),
        "sha256": _file_sha256(path),
    }


def generate(
    p: TrafficParams,
    n_families: int,
    tau_range: tuple[float, float],
    subsample_dt: float,
    out_dir: str | Path,
    seed: int = 0,
    equispaced: bool = False,
    c_source: str = "estimate",
    jobs: int = 1,
    g: GridSpec | None = None,
    cfg: ControllerConfig | None = None,
    config_hash: str | None = None,
) -> dict:
    """Run one adaptive loop per relaxation-time draw and snapshot pairs.

    Args:
        p: base physical parameters; tau is overridden per family.
        n_families: number of relaxation-time draws.
        tau_range: (lo, hi) bounds of the tau distribution (s).
        subsample_dt: snapshot cadence (s); must be a whole multiple of
            the kernel refresh cadence, since pairs exist only at
            refresh instants.
        out_dir: directory for the family files and manifest.json.
        seed: seeds the tau draws (the loop itself is deterministic).
        equispaced: draw taus on a uniform grid instead of i.i.d.
        c_source: "estimate" stores the evolving identifier estimate
            (what the surrogate must serve at runtime); "true" stores
            the static ground-truth coupling instead.
        jobs: worker processes; families are independent.
        g: space-time grid (default grid when omitted).
        cfg: controller settings (defaults when omitted).
        config_hash: provenance tag for the manifest; derived from the
            generation parameters when omitted.

    Returns:
        The manifest dict (also written to out_dir/manifest.json), with
        a "root" key pointing at out_dir for direct loading.

    Raises:
        ValueError: bad ranges, cadence mismatch, or unknown c_source.
    """
    g = g or GridSpec()
    cfg = cfg or ControllerConfig()
    lo, hi = float(tau_range[0]), float(tau_range[1])
    if not 0 < lo <= hi:
        raise ValueError("tau_range must satisfy 0 < lo <= hi")
    if n_families < 1:
        raise ValueError("n_families must be positive")
    if c_source not in ("estimate", "true"):
        raise ValueError(f"unknown c_source {c_source!r}")
    if subsample_dt < g.dt:
        raise ValueError("subsample_dt must be at least the simulation dt")
    cadence = cfg.kernel_refresh_dt
    stride_f = subsample_dt / cadence
    stride = int(round(stride_f))
    if stride < 1 or abs(stride_f - stride) > 1e-9:
        raise ValueError(
            "subsample_dt must be a whole multiple of kernel_refresh_dt"
        )
    # Every tau in range must stay inside the projection bound, or the
    # solver would be asked for kernels outside its certified ball.
    if 1.0 / lo > cfg.c_bar + 1e-12:
        raise ValueError(
            "tau_range admits couplings beyond c_bar; raise c_bar or lo"
        )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    if equispaced and n_families > 1:
        taus = np.linspace(lo, hi, n_families)
    elif equispaced:
        taus = np.array([0.5 * (lo + hi)])
    else:
        taus = rng.uniform(lo, hi, n_families)

    gen_params = {
        "traffic": asdict(p),
        "controller": asdict(cfg),
        "grid": asdict(g),
        "seed": seed,
        "n_families": n_families,
        "tau_range": [lo, hi],
        "subsample_dt": subsample_dt,
        "equispaced": equispaced,
        "c_source": c_source,
    }
    if config_hash is None:
        config_hash = _params_hash(gen_params)

    work = [
        (i, float(taus[i]), p, cfg, g, stride, c_source, str(out))
        for i in range(n_families)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_family, work))
    else:
        results = [_run_family(w) for w in work]

    families = [r for r in results if "error" not in r]
    skipped = [r for r in results if "error" in r]
    for r in skipped:
        log.warning(
            "family %d (tau=%.3f) skipped: %s", r["family"], r["tau"], r["error"]
        )

    manifest = {
        "format": _FORMAT,
        "version": _VERSION,
        "config_hash": config_hash,
        "mesh_n": cfg.mesh_n,
        "n_records": sum(f["n_records"] for f in families),
        "families": families,
        "skipped": skipped,
        **gen_params,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return {**manifest, "root": str(out)}


def load_manifest(path: str | Path) -> dict:
    """Read and validate a manifest; adds "root" for record loading."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read manifest {path}: {exc}") from exc
    if manifest.get("format") != _FORMAT:
        raise DatasetFormatError(f"{path} is not a dataset manifest")
    if manifest.get("version") != _VERSION:
        raise DatasetFormatError(
            f"unsupported dataset version {manifest.get('version')}"
        )
    manifest.setdefault("root", str(path.parent))
    return manifest


def _coerce_manifest(manifest: dict | str | Path) -> dict:
    if isinstance(manifest, (str, Path)):
        return load_manifest(manifest)
    if "root" not in manifest:
        raise DatasetFormatError("manifest dict lacks a root directory")
    return manifest


def iter_family(
    path: str | Path, mesh_n: int
) -> Iterator[tuple[float, np.ndarray, KernelPair]]:
    """Yield (time, estimate, KernelPair) entries from one family file."""
    blob = Path(path).read_bytes()
    entry = _entry_bytes(mesh_n)
    if len(blob) % entry:
        raise DatasetFormatError(
            f"{path}: size {len(blob)} is not a multiple of {entry}"
        )
    for off in range(0, len(blob), entry):
        t, m = _ENTRY_HEADER.unpack_from(blob, off)
        if m != mesh_n:
            raise DatasetFormatError(f"{path}: entry mesh {m} != {mesh_n}")
        c_off = off + _ENTRY_HEADER.size
        c = np.frombuffer(blob, dtype="<f8", count=m, offset=c_off).copy()
        rec = blob[c_off + 8 * m : off + entry]
        yield float(t), c, kernel_pair_from_record(rec)


def load_records(manifest: dict | str | Path) -> KernelDataset:
    """Stack every record under a manifest into training arrays.

    Parses the fixed-stride entries vectorized per family file rather
    than through iter_family, since full corpora run to tens of
    thousands of records.
    """
    manifest = _coerce_manifest(manifest)
    mesh_n = manifest["mesh_n"]
    root = Path(manifest["root"])
    tri = mesh_n * (mesh_n + 1) // 2
    entry = _entry_bytes(mesh_n)
    cs, kus, kvs = [], [], []
    for fam in manifest["families"]:
        blob = Path(root / fam["path"]).read_bytes()
        if len(blob) != entry * fam["n_records"]:
            raise DatasetFormatError(
                f"{fam['path']}: size {len(blob)} does not match manifest"
            )
        raw = np.frombuffer(blob, dtype=np.uint8).reshape(fam["n_records"], entry)
        c = raw[:, _ENTRY_HEADER.size : _ENTRY_HEADER.size + 8 * mesh_n]
        cs.append(c.copy().view("<f8"))
        payload_off = entry - 16 * tri
        pay = raw[:, payload_off:].copy().view("<f8")
        kus.append(pay[:, :tri])
        kvs.append(pay[:, tri:])
    if not cs:
        raise DatasetFormatError("manifest lists no families")
    return KernelDataset(
        mesh_n=mesh_n,
        c=np.concatenate(cs),
        ku=np.concatenate(kus),
        kv=np.concatenate(kvs),
    )


def split(
    manifest: dict | str | Path,
    ratio: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[dict, dict, dict]:
    """Family-stratified train/validation/test split.

    Whole families are assigned to one part so the held-out score
    measures generalization across relaxation times, not interpolation
    within a trajectory.  Counts follow largest-remainder rounding of
    the ratios.

    Raises:
        ValueError: ratios invalid, or fewer families than parts with a
            nonzero share.
    """
    manifest = _coerce_manifest(manifest)
    r = np.asarray(ratio, dtype=float)
    if r.shape != (3,) or np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
        raise ValueError("ratio must be three non-negative shares summing to 1")
    families = manifest["families"]
    n = len(families)
    n_parts = int(np.count_nonzero(r))
    if n < n_parts:
        raise ValueError(f"{n} families cannot cover {n_parts} nonzero splits")

    counts = np.floor(r * n).astype(int)
    # Nonzero shares get at least one family before remainders are dealt.
    for i in range(3):
        if r[i] > 0 and counts[i] == 0:
            counts[i] = 1
    while counts.sum() > n:
        counts[int(np.argmax(counts))] -= 1
    if counts.sum() < n:
        frac = r * n - np.floor(r * n)
        order = np.argsort(-frac)
        k = 0
        while counts.sum() < n:
            idx = int(order[k % 3])
            if r[idx] > 0:
                counts[idx] += 1
            k += 1

    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(counts)
    parts = (
        perm[: bounds[0]],
        perm[bounds[0] : bounds[1]],
        perm[bounds[1] : bounds[2]],
    )
    out = []
    for part in parts:
        sel = [families[int(i)] for i in sorted(part)]
        out.append(
            {
                **{k: v for k, v in manifest.items() if k != "families"},
                "families": sel,
                "n_records": sum(f["n_records"] for f in sel),
            }
        )
    return out[0], out[1], out[2]


def verify_labels(
    manifest: dict | str | Path,
    fraction: float = 0.01,
    seed: int = 0,
) -> dict:
    """Re-solve a random sample of records and compare to stored kernels.

    Returns a report dict with the number checked and the worst sup-norm
    discrepancy; records are solver outputs, so anything beyond the
    solver tolerance indicates corruption.
    """
    manifest = _coerce_manifest(manifest)
    root = Path(manifest["root"])
    mesh_n = manifest["mesh_n"]
    p = TrafficParams(**manifest["traffic"])
    cfg = ControllerConfig(**manifest["controller"])
    mesh = TriMesh(mesh_n)
    rng = np.random.default_rng(seed)

    index = [
        (fam, j)
        for fam in manifest["families"]
        for j in range(fam["n_records"])
    ]
    if not index:
        return {"checked": 0, "max_err": 0.0}
    n_check = max(1, int(round(fraction * len(index))))
    picks = rng.choice(len(index), size=min(n_check, len(index)), replace=False)

    worst = 0.0
    by_file: dict[str, list[int]] = {}
    for k in picks:
        fam, j = index[int(k)]
        by_file.setdefault(fam["path"], []).append(j)
    for fname, rows in by_file.items():
        fam = next(f for f in manifest["families"] if f["path"] == fname)
        entries = dict(
            (j, (c, kp))
            for j, (t, c, kp) in enumerate(iter_family(root / fname, mesh_n))
            if j in set(rows)
        )
        lp = derive_linearized(replace(p, tau=fam["tau"]))
        for j in rows:
            c, kp = entries[j]
            ref = solve_kernels(
                c, lp, mesh, tol=cfg.tol, max_iter=cfg.max_iter,
                c_bound=cfg.c_bar,
            )
            err = max(
                float(np.max(np.abs(ref.ku - kp.ku))),
                float(np.max(np.abs(ref.kv - kp.kv))),
            )
            worst = max(worst, err)
    return {"checked": len(picks), "max_err": worst}
