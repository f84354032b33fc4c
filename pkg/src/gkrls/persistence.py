"""Single-file model artifacts (.gkm): save and restore fitted models.

Layout: an 8-byte magic string, a little-endian uint32 header length, a
canonical (sorted-key, compact) UTF-8 JSON header, then a binary payload of
concatenated row-major little-endian float64 matrices. The header records
the format version, everything needed to rebuild the prediction path (parsed
spec, categorical codings, standardizers, sketch plans with their reference
points, coefficient layout, smoothing parameters, scale, stored covariance
matrices, diagnostics), and the byte offset/shape of every payload matrix.

Integrity: the header carries a SHA-256 over the canonical header-without-
hash bytes plus the payload, so any corruption — header or matrices — is
detected at load time. Artifacts are deterministic: saving the same fitted
model twice produces byte-identical files (no timestamps or environment
records).

Restored models predict and evaluate effects without the training data:
sketched kernels keep only their reference points. The exception is gaussian
sketching, where prediction needs similarities against *every* training row,
so the full standardized training covariate matrix is embedded — expect
artifacts of roughly N×d×8 bytes for those models.
"""

from __future__ import annotations

import hashlib
import json
import os
import re

import numpy as np

FORMAT_NAME = "gkm"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0
MAGIC = b"GKRLSMDL"

_HEADER_LEN_BYTES = 4
_FLOAT_DTYPE = "<f8"


class PersistenceError(RuntimeError):
    """Raised when an artifact cannot be written or restored."""


def _canonical(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _content_hash(header: dict, payload: bytes) -> str:
    probe = dict(header)
    probe.pop("content_hash", None)
    digest = hashlib.sha256()
    digest.update(_canonical(probe))
    digest.update(payload)
    return digest.hexdigest()


def _json_scalar(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {k: _json_scalar(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_scalar(x) for x in v]
    return v


class _PayloadWriter:
    """Accumulates named float64 matrices and their header descriptors."""

    def __init__(self):
        self.chunks = []
        self.entries = {}
        self.offset = 0

    def add(self, name: str, array) -> str:
        if name in self.entries:
            raise PersistenceError(f"duplicate payload matrix name {name!r}")
        arr = np.ascontiguousarray(np.asarray(array), dtype=_FLOAT_DTYPE)
        raw = arr.tobytes()
        self.entries[name] = {
            "offset": self.offset,
            "shape": list(arr.shape),
            "dtype": "float64",
        }
        self.chunks.append(raw)
        self.offset += len(raw)
        return name

    def payload(self) -> bytes:
        return b"".join(self.chunks)


def save_model(model, path) -> dict:
    """Write a fitted model to ``path`` as a .gkm artifact.

    Returns the artifact header. An unconverged fit is saved with its
    ``converged`` flag cleared rather than rejected.
    """
    if not hasattr(model, "coef_"):
        raise PersistenceError("cannot save an unfitted model; call fit() first")

    design = model.design_
    writer = _PayloadWriter()
    writer.add("coef", model.coef_)
    writer.add("fitted", model.fitted_values_)
    writer.add("eta", model.eta_values_)

    notes = list(model.notes_)
    blocks_meta = []
    for j, b in enumerate(design.blocks):
        entry = {
            "label": b.label,
            "kind": b.kind,
            "q": int(b.q),
            "rank": int(b.rank),
            "logdet_pos": float(b.logdet_pos),
        }
        if b.kind == "kernel":
            kb = b.kernel_block
            entry["var_names"] = list(b.var_names)
            entry["standardizer"] = b.standardizer.to_dict()
            entry["bandwidth"] = float(kb.bandwidth)
            entry["plan"] = kb.plan.to_dict()
            entry["reference"] = writer.add(f"block{j}_reference", kb.reference)
            if b.coef_transform is not None:
                entry["coef_transform"] = writer.add(
                    f"block{j}_transform", b.coef_transform
                )
            if kb.plan.method == "gaussian":
                entry["sketch_coefficients"] = writer.add(
                    f"block{j}_sketch", kb.plan.coefficients
                )
                notes.append(
                    f"{b.label}: gaussian sketching embeds the full "
                    f"standardized training matrix "
                    f"({kb.reference.shape[0]} x {kb.reference.shape[1]})"
                )
        else:
            entry["group"] = b.group
            entry["levels"] = list(b.levels)
        blocks_meta.append(entry)

    covs = []
    for key, est in getattr(model, "covariances_", {}).items():
        safe = re.sub(r"[^A-Za-z0-9_]", "_", str(key))
        covs.append(
            {
                "key": str(key),
                "kind": est.kind,
                "meta": _json_scalar(est.meta),
                "matrix": writer.add(f"cov_{safe}", est.full),
            }
        )

    diagnostics = model.summary()
    diagnostics.pop("timing_seconds", None)

    params = {
        name: _json_scalar(getattr(model, name))
        for name in (
            "family", "criterion", "intercept", "sketch", "delta",
            "sketch_size", "standardize", "bandwidth", "seed", "starts",
            "include_linear", "max_kernel_n", "force_kernel",
        )
    }

    header = {
        "format": {"name": FORMAT_NAME, "major": FORMAT_MAJOR, "minor": FORMAT_MINOR},
        "endianness": "little",
        "model": {
            "spec": model.spec_.to_dict(),
            "spec_string": model.spec_.to_string(),
            "outcome": design.outcome,
            "family": model.family_.name,
            "intercept": bool(design.intercept),
            "fixed_names": list(design.fixed_names),
            "p": int(design.p),
            "n_obs": int(model.n_obs_),
            "lambda": _json_scalar(np.asarray(model.lambda_)),
            "rho": _json_scalar(np.asarray(model.rho_)),
            "sigma2": float(model.sigma2_),
            "edf": float(model.edf_),
            "criterion": model.criterion,
            "criterion_value": float(model.criterion_value_),
            "converged": bool(model.converged_),
            "notes": notes,
        },
        "params": params,
        "categoricals": {
            name: coding.to_dict() for name, coding in design.categoricals.items()
        },
        "blocks": blocks_meta,
        "covariances": covs,
        "diagnostics": _json_scalar(diagnostics),
        "matrices": writer.entries,
    }

    payload = writer.payload()
    header["content_hash"] = _content_hash(header, payload)
    header_bytes = _canonical(header)

    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header_bytes).to_bytes(_HEADER_LEN_BYTES, "little"))
            fh.write(header_bytes)
            fh.write(payload)
    except OSError as err:
        raise PersistenceError(f"cannot write artifact {path!r}: {err}") from None
    return header


def _read_matrix(payload: bytes, entry: dict, name: str) -> np.ndarray:
    shape = tuple(int(s) for s in entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    start = int(entry["offset"])
    end = start + count * 8
    if end > len(payload):
        raise PersistenceError(
            f"artifact is truncated: matrix {name!r} extends past the payload"
        )
    return np.frombuffer(payload[start:end], dtype=_FLOAT_DTYPE).reshape(shape).copy()


def load_model(path):
    """Restore a .gkm artifact as a prediction-ready model.

    The restored model predicts, evaluates effects against supplied tables,
    and serves its stored covariance matrices; it carries no training rows,
    so operations that need them (refitting, new covariance kinds,
    effects without an evaluation table) raise with an explanation.
    """
    from .data import CategoricalCoding
    from .estimator import GKRLS
    from .families import get_family
    from .inference import VarianceEstimate
    from .kernel import KernelBlock, SketchPlan
    from .terms import AssembledDesign, ModelSpec, PenalizedBlock

    if not os.path.isfile(path):
        raise PersistenceError(f"no artifact at {path!r}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + _HEADER_LEN_BYTES:
        raise PersistenceError(f"{path!r} is not a model artifact (file too short)")
    if blob[: len(MAGIC)] != MAGIC:
        raise PersistenceError(f"{path!r} is not a model artifact (bad magic)")
    hlen = int.from_bytes(
        blob[len(MAGIC): len(MAGIC) + _HEADER_LEN_BYTES], "little"
    )
    hstart = len(MAGIC) + _HEADER_LEN_BYTES
    if hstart + hlen > len(blob):
        raise PersistenceError(f"{path!r} is truncated inside its header")
    try:
        header = json.loads(blob[hstart: hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise PersistenceError(f"{path!r} has an unreadable header: {err}") from None

    fmt = header.get("format", {})
    if fmt.get("name") != FORMAT_NAME or "major" not in fmt:
        raise PersistenceError(f"{path!r} is not a {FORMAT_NAME} artifact")
    if int(fmt["major"]) > FORMAT_MAJOR:
        raise PersistenceError(
            f"artifact format {fmt['major']}.{fmt.get('minor', 0)} is newer than "
            f"this library supports ({FORMAT_MAJOR}.{FORMAT_MINOR}); "
            f"upgrade to load it"
        )

    payload = blob[hstart + hlen:]
    expected = header.get("content_hash")
    if expected is None or _content_hash(header, payload) != expected:
        raise PersistenceError(
            f"{path!r} failed its integrity check (content hash mismatch); "
            f"the file is corrupted or was edited"
        )

    matrices = header["matrices"]

    def mat(name):
        if name not in matrices:
            raise PersistenceError(f"artifact is missing matrix {name!r}")
        return _read_matrix(payload, matrices[name], name)

    minfo = header["model"]
    categoricals = {
        name: CategoricalCoding.from_dict(d)
        for name, d in header.get("categoricals", {}).items()
    }

    blocks = []
    for entry in header["blocks"]:
        q = int(entry["q"])
        if entry["kind"] == "kernel":
            from .data import StandardizationTransform

            plan_d = entry["plan"]
            coefficients = (
                mat(entry["sketch_coefficients"])
                if "sketch_coefficients" in entry
                else None
            )
            plan = SketchPlan(
                method=plan_d["method"],
                delta=float(plan_d["delta"]),
                M=int(plan_d["M"]),
                seed=int(plan_d["seed"]),
                N=int(plan_d["N"]),
                indices=(
                    None if plan_d.get("indices") is None
                    else np.asarray(plan_d["indices"], dtype=int)
                ),
                coefficients=coefficients,
            )
            kb = KernelBlock(
                design=None,
                penalty=None,
                bandwidth=float(entry["bandwidth"]),
                reference=mat(entry["reference"]),
                plan=plan,
            )
            blocks.append(
                PenalizedBlock(
                    Z=np.empty((0, q)),
                    S=np.empty((0, 0)),
                    label=entry["label"],
                    kind="kernel",
                    rank=int(entry["rank"]),
                    logdet_pos=float(entry["logdet_pos"]),
                    var_names=list(entry["var_names"]),
                    standardizer=StandardizationTransform.from_dict(
                        entry["standardizer"]
                    ),
                    kernel_block=kb,
                    coef_transform=(
                        mat(entry["coef_transform"])
                        if "coef_transform" in entry
                        else None
                    ),
                )
            )
        else:
            blocks.append(
                PenalizedBlock(
                    Z=np.empty((0, q)),
                    S=np.empty((0, 0)),
                    label=entry["label"],
                    kind=entry["kind"],
                    rank=int(entry["rank"]),
                    logdet_pos=float(entry["logdet_pos"]),
                    group=entry["group"],
                    levels=list(entry["levels"]),
                )
            )

    spec = ModelSpec.from_dict(minfo["spec"])
    p = int(minfo["p"])
    design = AssembledDesign(
        X=np.empty((0, p)),
        fixed_names=list(minfo["fixed_names"]),
        blocks=blocks,
        intercept=bool(minfo["intercept"]),
        outcome=minfo.get("outcome"),
        categoricals=categoricals,
        terms=spec.terms,
        notes=list(minfo.get("notes", [])),
    )

    model = GKRLS(spec=minfo.get("spec_string"), **header.get("params", {}))
    model.spec_ = spec
    model.design_ = design
    model.dataset_ = None
    model.state_ = None
    model.fit_ = None
    model.family_ = get_family(minfo["family"])
    model.coef_ = mat("coef")
    model.beta_ = model.coef_[:p]
    alphas = []
    pos = p
    for b in blocks:
        alphas.append(model.coef_[pos: pos + b.q])
        pos += b.q
    model.alphas_ = alphas
    model.lambda_ = np.asarray(minfo["lambda"], dtype=float)
    model.rho_ = np.asarray(minfo["rho"], dtype=float)
    model.sigma2_ = float(minfo["sigma2"])
    model.edf_ = float(minfo["edf"])
    model.criterion_value_ = float(minfo["criterion_value"])
    model.converged_ = bool(minfo["converged"])
    model.fitted_values_ = mat("fitted")
    model.eta_values_ = mat("eta")
    model.fixed_names_ = list(minfo["fixed_names"])
    model.n_obs_ = int(minfo["n_obs"])
    model.notes_ = list(minfo.get("notes", []))
    model.covariances_ = {
        c["key"]: VarianceEstimate(
            kind=c["kind"], full=mat(c["matrix"]), meta=dict(c.get("meta", {}))
        )
        for c in header.get("covariances", [])
    }
    model.artifact_summary_ = header.get("diagnostics")
    return model
