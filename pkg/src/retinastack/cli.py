"""Command-line workflow: split, upsample, preprocess, train, predict, stack, evaluate.

Stages talk to each other only through files in the work directory:

    folds.csv                    fold assignment of the original samples
    upsample.csv                 replica plan (if up-sampling is enabled)
    features/<arch>.csv          feature table for originals and replicas
    features/<arch>.test.csv     feature table for the test manifest
    models/<member>.json         trained reference model
    models/<member>.history.csv  per-epoch losses
    preds/val/<member>.csv       member predictions on its held-out fold
    preds/test/<member>.csv      member predictions on the test manifest
    preds/replica/<member>.csv   member predictions on stacker replicas
    stacker.json                 per-class logistic regressions
    preds/stacked_cv.csv         cross-validated stacker predictions
    preds/stacked_test.csv       final predictions for the test manifest
    reports/                     evaluation JSON/CSV and ROC CSV/SVG

Exit codes: 0 ok, 2 usage or validation error, 3 numerical failure,
4 degenerate data (unless ``--allow-degenerate``).
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import FORMAT_VERSIONS, __version__
from .dataset import DEFAULT_RISK_NAME, LabelMatrix, attach_images, label_counts, load_manifest, targets
from .ensemble import (
    EnsembleError,
    EnsembleSpec,
    StackedModel,
    assemble_features,
    bag_members,
    fit_stacker,
    member_id,
    merge_out_of_fold,
    oof_features,
    predict_stacked,
    stacker_cv_predictions,
    verify_out_of_fold,
)
from .imaging import AugmentConfig, augment, read_image, sample_augment_params
from .lbfgs import NonFiniteError
from .losses import binary_class_weights
from .metrics import EvalReport, evaluate_multilabel, macro_over_folds, roc_curve
from .predictions import PredictionMatrix
from .sampling import (
    FoldAssignment,
    UpsamplePlan,
    effective_counts,
    expand_folds,
    fold_label_counts,
    replica_id,
    stratified_kfold,
    upsample_plan,
)
from .seeds import derive_seed
from .training import (
    FeatureSpec,
    ReferenceModel,
    TrainingConfig,
    TrainingDivergedError,
    extract_features,
    feature_table_csv,
    fit_reference_model,
    parse_feature_table,
    predict,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DEGENERATE = 0, 2, 3, 4


class UsageError(ValueError):
    pass


class DegenerateError(RuntimeError):
    pass


# -- config ----------------------------------------------------------------

DEFAULT_CONFIG = {
    "manifest": None,
    "image_root": None,
    "test_manifest": None,
    "test_image_root": None,
    "work_dir": "work",
    "risk_name": DEFAULT_RISK_NAME,
    "seed": 0,
    "k": 5,
    "upsample_threshold": 0,
    # two heterogeneous views: zoomed-in centre, coarse full field
    "architectures": {
        "center": {"kind": "pixels", "size": 16, "zoom": 0.5},
        "full": {"kind": "pixels", "size": 12},
    },
    "detector_architectures": ["center", "full"],
    "classifier_architectures": ["center", "full"],
    "loss": "focal",
    "training": asdict(TrainingConfig()),
    "augment": asdict(AugmentConfig()),
    "stacker": {"l2": 1e-4, "logit": False, "mode": "oof", "replicas": 1},
}

PATH_KEYS = ("manifest", "image_root", "test_manifest", "test_image_root", "work_dir")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise UsageError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return cfg


def _merge(base: dict, doc: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in doc.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key != "architectures":
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: Sequence[str] = ()) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides.

    Relative paths are resolved against the config file's directory.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    base = Path.cwd()
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {p} is not valid JSON: {exc}") from None
        cfg = _merge(cfg, doc)
        base = p.resolve().parent
    cfg = apply_overrides(cfg, overrides)
    for key in PATH_KEYS:
        if cfg[key] is not None:
            cfg[key] = str((base / cfg[key]).resolve()) if not Path(cfg[key]).is_absolute() else cfg[key]
    for arch in cfg["architectures"].values():
        if arch.get("path") and not Path(arch["path"]).is_absolute():
            arch["path"] = str((base / arch["path"]).resolve())
    try:
        TrainingConfig.from_dict(cfg["training"])
        AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["augment"].items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    if cfg["stacker"]["mode"] not in ("oof", "replica"):
        raise UsageError("stacker.mode must be 'oof' or 'replica'")
    for t in ("detector_architectures", "classifier_architectures"):
        for a in cfg[t]:
            if a not in cfg["architectures"]:
                raise UsageError(f"{t} names unknown architecture {a!r}")
    return cfg


def _require_paths(cfg: dict, keys: Sequence[str]) -> None:
    for key in keys:
        if cfg.get(key) is None:
            raise UsageError(f"config needs {key!r}")
        if not Path(cfg[key]).exists():
            raise UsageError(f"{key} not found: {cfg[key]}")


def _training_config(cfg: dict) -> TrainingConfig:
    return TrainingConfig.from_dict(cfg["training"])


def _augment_config(cfg: dict) -> AugmentConfig:
    return AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["augment"].items()})


def _feature_spec(cfg: dict, arch: str) -> FeatureSpec:
    a = cfg["architectures"][arch]
    if a.get("kind", "pixels") == "pixels":
        return FeatureSpec("pixels", int(a["size"]), zoom=float(a.get("zoom", 1.0)))
    return FeatureSpec("embedding", length=int(a.get("length", 0)))


# -- file helpers ----------------------------------------------------------

def atomic_write(path: str | Path, text: str) -> None:
    """Write through a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path: Path, what: str) -> str:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path} (run the earlier stage first)")
    return path.read_text(encoding="utf-8")


class Work:
    """Paths inside the work directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    folds = property(lambda self: self.root / "folds.csv")
    plan = property(lambda self: self.root / "upsample.csv")
    stacker = property(lambda self: self.root / "stacker.json")
    reports = property(lambda self: self.root / "reports")

    def features(self, arch: str, test: bool = False) -> Path:
        return self.root / "features" / (f"{arch}.test.csv" if test else f"{arch}.csv")

    def model(self, mid: str) -> Path:
        return self.root / "models" / f"{mid}.json"

    def history(self, mid: str) -> Path:
        return self.root / "models" / f"{mid}.history.csv"

    def preds(self, kind: str, mid: str) -> Path:
        return self.root / "preds" / kind / f"{mid}.csv"

    def stacked(self, kind: str) -> Path:
        return self.root / "preds" / f"stacked_{kind}.csv"


def _manifest(cfg: dict, test: bool = False) -> LabelMatrix:
    key = "test_manifest" if test else "manifest"
    _require_paths(cfg, [key])
    return load_manifest(cfg[key], disease_risk_name=cfg["risk_name"])


def _plan(cfg: dict, work: Work) -> UpsamplePlan:
    if int(cfg["upsample_threshold"]) <= 0:
        return UpsamplePlan(())
    return UpsamplePlan.from_csv(_read(work.plan, "upsample plan"))


def _stack_replicas(cfg: dict, m: LabelMatrix) -> list[tuple[str, str, int]]:
    """(replica id, source id, aug seed) rows the replica-mode stacker trains on."""
    if cfg["stacker"]["mode"] != "replica":
        return []
    n = int(cfg["stacker"].get("replicas", 1))
    return [(f"{sid}~stk{r}", sid, derive_seed(cfg["seed"], "stack-replica", i, r))
            for i, sid in enumerate(m.sample_ids) for r in range(1, n + 1)]


def _expanded(cfg: dict, work: Work):
    """Labels, folds and (id, source) rows including up-sampled replicas."""
    m = _manifest(cfg)
    folds = FoldAssignment.from_csv(_read(work.folds, "fold file"))
    if set(folds.sample_ids) != set(m.sample_ids):
        raise UsageError("fold file does not cover exactly the manifest samples")
    plan = _plan(cfg, work)
    return m, folds, plan


# -- commands --------------------------------------------------------------

def cmd_split(args, cfg) -> int:
    m = _manifest(cfg)
    k = int(cfg["k"])
    if k < 2:
        raise UsageError("k must be >= 2")
    y = m.to_array()
    fa = stratified_kfold(y, k, derive_seed(cfg["seed"], "split"), m.sample_ids)
    out = Path(args.out) if getattr(args, "out", None) else Work(cfg["work_dir"]).folds
    atomic_write(out, fa.to_csv())
    counts = fold_label_counts(y, fa)
    names = m.schema.class_names
    print("fold,size," + ",".join(names))
    for f in range(k):
        print(f"{f},{len(fa.members(f))}," + ",".join(str(int(c)) for c in counts[f]))
    return EXIT_OK


def cmd_upsample(args, cfg) -> int:
    m = _manifest(cfg)
    threshold = int(cfg["upsample_threshold"])
    if threshold < 0:
        raise UsageError("upsample_threshold must be >= 0")
    plan = upsample_plan(m, threshold, derive_seed(cfg["seed"], "upsample"))
    out = Path(args.out) if getattr(args, "out", None) else Work(cfg["work_dir"]).plan
    atomic_write(out, plan.to_csv())
    eff = effective_counts(m, plan)
    before = label_counts(m)
    print(f"replicas: {len(plan.entries)}; samples {len(m.records)} -> {len(m.records) + len(plan.entries)}")
    for name in m.schema.class_names:
        print(f"{name}: {before[name]} -> {eff[name]}")
    return EXIT_OK


def _load_images(m: LabelMatrix, root: str) -> dict[str, np.ndarray]:
    m = attach_images(m, root)
    return {r.sample_id: read_image(r.image_path) for r in m.records}


def cmd_preprocess(args, cfg) -> int:
    work = Work(cfg["work_dir"])
    archs = [args.arch] if getattr(args, "arch", None) else list(cfg["architectures"])
    m = _manifest(cfg)
    plan = _plan(cfg, work)
    aug_cfg = _augment_config(cfg)
    stack_reps = _stack_replicas(cfg, m)
    pixel_archs = [a for a in archs if _feature_spec(cfg, a).kind == "pixels"]
    images = test_images = None
    if pixel_archs:
        _require_paths(cfg, ["image_root"])
        images = _load_images(m, cfg["image_root"])
        if cfg["test_manifest"]:
            _require_paths(cfg, ["test_image_root"])
            test_images = _load_images(_manifest(cfg, test=True), cfg["test_image_root"])
    rows: list[tuple[str, str, int | None]] = [(s, s, None) for s in m.sample_ids]
    rows += [(replica_id(e.source_id, e.replica_index), e.source_id, e.aug_seed) for e in plan.entries]
    rows += stack_reps
    with warnings.catch_warnings():
        # images without a known camera profile are padded only; say so once
        warnings.simplefilter("once")
        for arch in archs:
            spec = _feature_spec(cfg, arch)
            if spec.kind == "embedding":
                _check_embedding(cfg, arch, [r[0] for r in rows])
                continue
            ids, feats = [], []
            for rid, src, seed in rows:
                img = images[src]
                if seed is not None:
                    img = augment(img, sample_augment_params(seed, aug_cfg))
                ids.append(rid)
                feats.append(extract_features(img, spec))
            atomic_write(work.features(arch), feature_table_csv(ids, np.asarray(feats)))
            print(f"{arch}: {len(ids)} rows x {spec.n_features} features")
            if test_images is not None:
                tids = list(test_images)
                tf = [extract_features(test_images[s], spec) for s in tids]
                atomic_write(work.features(arch, test=True), feature_table_csv(tids, np.asarray(tf)))
    return EXIT_OK


def _check_embedding(cfg: dict, arch: str, ids: Sequence[str]) -> None:
    path = cfg["architectures"][arch].get("path")
    if not path or not Path(path).is_file():
        raise UsageError(f"embedding table for {arch!r} not found: {path}")
    have, _ = parse_feature_table(Path(path).read_text(encoding="utf-8"))
    missing = sorted(set(ids) - set(have))
    if missing:
        raise UsageError(f"embedding table for {arch!r} lacks {len(missing)} id(s), e.g. {missing[0]!r}")


def _load_features(cfg: dict, work: Work, arch: str, test: bool = False) -> dict[str, np.ndarray]:
    a = cfg["architectures"][arch]
    if a.get("kind", "pixels") == "embedding":
        path = a.get("test_path" if test else "path")
        if not path:
            raise UsageError(f"no {'test ' if test else ''}embedding table for {arch!r}")
        path = Path(path)
    else:
        path = work.features(arch, test)
    ids, X = parse_feature_table(_read(path, f"feature table for {arch!r}"))
    return dict(zip(ids, X))


def _mode_targets(m: LabelMatrix, mode: str):
    y, names = targets(m, mode)
    if not names:
        raise UsageError("no label classes: the schema has only the disease-risk column")
    return y, names


def _member_job(cfg: dict, work_root: str, mode: str, arch: str, fold: int):
    """Train one fold member; returns texts to write (runs in a worker process)."""
    work = Work(work_root)
    m, folds, plan = _expanded(cfg, work)
    feats = _load_features(cfg, work, arch)
    y_all, names = _mode_targets(m, mode)
    row = {s: i for i, s in enumerate(m.sample_ids)}
    fold_of = folds.fold_of
    train_ids = [s for s in m.sample_ids if fold_of[s] != fold]
    train_ids += [replica_id(e.source_id, e.replica_index) for e in plan.entries
                  if fold_of[e.source_id] != fold]
    src = {replica_id(e.source_id, e.replica_index): e.source_id for e in plan.entries}
    val_ids = [s for s in m.sample_ids if fold_of[s] == fold]
    missing = [s for s in train_ids + val_ids if s not in feats]
    if missing:
        raise UsageError(f"feature table for {arch!r} lacks {len(missing)} row(s), e.g. {missing[0]!r}")
    Xt = np.asarray([feats[s] for s in train_ids])
    Yt = y_all[[row[src.get(s, s)] for s in train_ids]]
    Xv = np.asarray([feats[s] for s in val_ids])
    Yv = y_all[[row[s] for s in val_ids]]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        weights = binary_class_weights(Yt, names, on_empty="unit")
    notes = [str(w.message) for w in caught]
    if any((Yt[:, j].min() == Yt[:, j].max()) for j in range(Yt.shape[1])):
        notes.append(f"single-outcome class in training fold {fold}; unit weight used")
    tcfg = TrainingConfig.from_dict(
        {**cfg["training"], "seed": derive_seed(cfg["seed"], "train", mode, arch, fold) % 2**63}
    )
    spec = _feature_spec(cfg, arch)
    if spec.kind == "embedding":
        spec = FeatureSpec("embedding", length=Xt.shape[1])
    res = fit_reference_model(Xt, Yt, Xv, Yv, weights, cfg["loss"], tcfg, names, spec)
    return member_id(mode, arch, fold), res.model.to_json(), res.history_csv(), len(res.history), notes


def _members(cfg: dict, mode: str | None, arch: str | None, fold: int | None):
    out = []
    for t in ("detector", "classifier"):
        if mode and t != mode:
            continue
        for a in cfg[f"{t}_architectures"]:
            if arch and a != arch:
                continue
            for f in range(int(cfg["k"])):
                if fold is not None and f != fold:
                    continue
                out.append((t, a, f))
    if arch and not out:
        raise UsageError(f"architecture {arch!r} is not configured for {mode or 'any'} models")
    return out


def cmd_train(args, cfg) -> int:
    work = Work(cfg["work_dir"])
    if args.fold is not None and not 0 <= args.fold < int(cfg["k"]):
        raise UsageError(f"fold must lie in [0, {cfg['k']})")
    _read(work.folds, "fold file")
    if args.mode == "classifier":
        _mode_targets(_manifest(cfg), "classifier")
    jobs = _members(cfg, args.mode, args.arch, args.fold)
    results = _run_jobs(cfg, work, jobs, int(getattr(args, "workers", 1) or 1))
    for mid, model_json, hist, epochs, notes in results:
        for n in notes:
            print(f"warning: {mid}: {n}", file=sys.stderr)
        atomic_write(work.model(mid), model_json)
        atomic_write(work.history(mid), hist)
        print(f"{mid}: {epochs} epochs")
    return EXIT_OK


def _run_jobs(cfg, work, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [_member_job(cfg, str(work.root), *j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(_member_job, cfg, str(work.root), *j) for j in jobs]
        return [f.result() for f in futures]


def cmd_predict(args, cfg) -> int:
    work = Work(cfg["work_dir"])
    m, folds, _ = _expanded(cfg, work)
    fold_of = folds.fold_of
    stack_ids = [r[0] for r in _stack_replicas(cfg, m)]
    test_m = _manifest(cfg, test=True) if cfg["test_manifest"] else None
    for mode, arch, fold in _members(cfg, getattr(args, "mode", None), getattr(args, "arch", None), None):
        mid = member_id(mode, arch, fold)
        model = ReferenceModel.from_json(_read(work.model(mid), f"model {mid}"))
        feats = _load_features(cfg, work, arch)
        val_ids = [s for s in m.sample_ids if fold_of[s] == fold]
        _write_preds(work.preds("val", mid), model, feats, val_ids, mid)
        if stack_ids:
            _write_preds(work.preds("replica", mid), model, feats, stack_ids, mid)
        if test_m is not None:
            tfeats = _load_features(cfg, work, arch, test=True)
            _write_preds(work.preds("test", mid), model, tfeats, test_m.sample_ids, mid)
        print(f"{mid}: predicted")
    return EXIT_OK


def _write_preds(path, model, feats, ids, mid):
    missing = [s for s in ids if s not in feats]
    if missing:
        raise UsageError(f"{mid}: no features for {len(missing)} sample(s), e.g. {missing[0]!r}")
    p = predict(model, np.asarray([feats[s] for s in ids]).reshape(len(ids), model.n_features), ids, mid)
    atomic_write(path, p.to_csv())


def _spec(cfg: dict) -> EnsembleSpec:
    return EnsembleSpec.grid(cfg["detector_architectures"], cfg["classifier_architectures"], int(cfg["k"]))


def _load_member_preds(work: Work, spec: EnsembleSpec, kind: str) -> dict[str, PredictionMatrix]:
    return {mid: PredictionMatrix.from_csv(_read(work.preds(kind, mid), f"{kind} predictions"), mid)
            for mid in spec.model_ids}


def _check_degenerate(y: np.ndarray, names: Sequence[str], allow: bool) -> None:
    bad = [n for j, n in enumerate(names) if y[:, j].min() == y[:, j].max()]
    if bad and not allow:
        raise DegenerateError(f"stacker classes without both outcomes: {bad} (use --allow-degenerate)")


def _stacker_rows(cfg: dict, work: Work, allow_degenerate: bool):
    """Stacking features, names, targets, fold index and the member spec."""
    m, folds, _ = _expanded(cfg, work)
    spec = _spec(cfg)
    fold_of = folds.fold_of
    y_all = m.to_array()
    if cfg["stacker"]["mode"] == "oof":
        preds = _load_member_preds(work, spec, "val")
        X, names, bagged = oof_features(preds, spec, folds, m.sample_ids, cfg["stacker"]["logit"])
        return X, names, y_all, np.asarray([fold_of[s] for s in m.sample_ids]), bagged, m
    reps = _stack_replicas(cfg, m)
    ids = [r[0] for r in reps]
    row = {s: i for i, s in enumerate(m.sample_ids)}
    preds = _load_member_preds(work, spec, "replica")
    X, names = assemble_features(list(preds.values()), ids, spec, cfg["stacker"]["logit"])
    y = y_all[[row[r[1]] for r in reps]]
    return X, names, y, np.asarray([fold_of[r[1]] for r in reps]), spec, m


def cmd_stack_fit(args, cfg) -> int:
    if args.preds_dir:
        return _stack_fit_external(args, cfg)
    work = Work(cfg["work_dir"])
    X, names, y, fold_index, members, m = _stacker_rows(cfg, work, args.allow_degenerate)
    classes = list(m.schema.class_names)
    _check_degenerate(y, classes, args.allow_degenerate)
    l2 = float(cfg["stacker"]["l2"])
    s = fit_stacker(X, names, y, classes, l2, members, cfg["stacker"]["logit"], cfg["stacker"]["mode"])
    _check_fit(s)
    atomic_write(work.stacker, s.to_json())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cv = stacker_cv_predictions(X, names, y, classes, fold_index, l2)
    row_ids = m.sample_ids if cfg["stacker"]["mode"] == "oof" else [r[0] for r in _stack_replicas(cfg, m)]
    atomic_write(work.stacked("cv"), PredictionMatrix("stacked", row_ids, classes, cv).to_csv())
    print(f"stacking features: {len(names)}")
    print(f"stacker models: {len(s.classes)}")
    return EXIT_OK


def _check_fit(s: StackedModel) -> None:
    for c in s.classes:
        mdl = s.models[c]
        if not (np.all(np.isfinite(mdl.coefficients)) and np.isfinite(mdl.intercept)):
            raise NonFiniteError(f"stacker for {c!r} has non-finite parameters")


def _stack_fit_external(args, cfg) -> int:
    """Stack externally produced member CSVs (one file per model_id)."""
    files = sorted(Path(args.preds_dir).glob("*.csv"))
    if not files:
        raise UsageError(f"no prediction CSVs in {args.preds_dir}")
    preds = [PredictionMatrix.read(f) for f in files]
    spec = EnsembleSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else None
    m = _manifest(cfg)
    X, names = assemble_features(preds, m.sample_ids, spec, cfg["stacker"]["logit"])
    y = m.to_array()
    classes = list(m.schema.class_names)
    _check_degenerate(y, classes, args.allow_degenerate)
    s = fit_stacker(X, names, y, classes, float(cfg["stacker"]["l2"]), spec, cfg["stacker"]["logit"], "external")
    _check_fit(s)
    atomic_write(Path(args.out) if args.out else Work(cfg["work_dir"]).stacker, s.to_json())
    print(f"stacking features: {len(names)}")
    print(f"stacker models: {len(s.classes)}")
    return EXIT_OK


def cmd_stack_predict(args, cfg) -> int:
    work = Work(cfg["work_dir"])
    s = StackedModel.from_dict(json.loads(_read(Path(args.stacker) if args.stacker else work.stacker,
                                                "stacked model")))
    if args.preds_dir:
        preds = [PredictionMatrix.read(f) for f in sorted(Path(args.preds_dir).glob("*.csv"))]
    else:
        spec = _spec(cfg)
        members = _load_member_preds(work, spec, "test")
        preds = bag_members(members, spec) if s.mode == "oof" else list(members.values())
    if not preds:
        raise UsageError("no member predictions to stack")
    out = predict_stacked(s, preds)
    atomic_write(Path(args.out) if args.out else work.stacked("test"), out.to_csv())
    print(f"stacked predictions: {len(out.sample_ids)} samples x {len(out.class_names)} classes")
    return EXIT_OK


def write_evaluation(preds: PredictionMatrix, truth: LabelMatrix, stem: Path,
                     folds: FoldAssignment | None = None) -> EvalReport:
    """Report JSON/CSV plus one ROC CSV/SVG per evaluable class."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if folds is None:
            report = evaluate_multilabel(preds, truth)
        else:
            fold_of = folds.fold_of
            missing = [s for s in preds.sample_ids if s not in fold_of]
            if missing:
                raise UsageError(f"{len(missing)} predicted sample(s) missing from fold file")
            per = []
            for f in range(folds.k):
                ids = [s for s in preds.sample_ids if fold_of[s] == f]
                if ids:
                    per.append(evaluate_multilabel(preds.select(ids), truth, f"fold{f}"))
            report = macro_over_folds(per)
    atomic_write(stem.with_suffix(".json"), report.to_json())
    atomic_write(stem.with_suffix(".csv"), report.to_csv())
    row = {s: i for i, s in enumerate(truth.sample_ids)}
    y = truth.to_array()[[row[s] for s in preds.sample_ids]]
    for j, c in enumerate(preds.class_names):
        col = y[:, truth.schema.index(c)]
        if col.min() == col.max():
            continue
        curve = roc_curve(preds.values[:, j], col)
        atomic_write(stem.parent / f"{stem.name}_roc_{c}.csv", curve.to_csv())
        atomic_write(stem.parent / f"{stem.name}_roc_{c}.svg", curve.to_svg(title=f"{c} ROC"))
    return report


def cmd_evaluate(args, cfg) -> int:
    truth = load_manifest(args.truth, disease_risk_name=cfg["risk_name"]) if args.truth else _manifest(cfg)
    preds = PredictionMatrix.read(args.preds)
    folds = FoldAssignment.read(args.folds) if args.folds else None
    stem = Path(args.out) if args.out else Work(cfg["work_dir"]).reports / Path(args.preds).stem
    try:
        report = write_evaluation(preds, truth, stem, folds)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    print(f"macro_auroc {report.macro_auroc:.6f}  macro_map {report.macro_map:.6f}")
    if report.skipped:
        print(f"skipped classes: {', '.join(report.skipped)}")
    return EXIT_OK


def _evaluate_run(cfg: dict, work: Work) -> dict:
    """Member, architecture and stacked reports for a finished run."""
    m, folds, _ = _expanded(cfg, work)
    spec = _spec(cfg)
    members = _load_member_preds(work, spec, "val")
    summary = {"members": {}, "architectures": {}}
    for mid, p in members.items():
        r = write_evaluation(p, m, work.reports / "members" / mid)
        summary["members"][mid] = r.macro_auroc
    for b in spec.bagged().members:
        block = merge_out_of_fold(members, spec, b.model_type, b.architecture, folds, m.sample_ids)
        verify_out_of_fold([block], spec, folds)
        r = write_evaluation(block.preds, m, work.reports / "architectures" / b.model_id, folds)
        summary["architectures"][b.model_id] = r.macro_auroc
    cv = PredictionMatrix.from_csv(_read(work.stacked("cv"), "stacker CV predictions"), "stacked")
    if cfg["stacker"]["mode"] == "oof":
        r = write_evaluation(cv, m, work.reports / "stacked", folds)
    else:
        truth = _replica_truth(cfg, m)
        rep_folds = FoldAssignment(folds.k, truth.sample_ids,
                                   [folds.fold_of[r[1]] for r in _stack_replicas(cfg, m)])
        r = write_evaluation(cv, truth, work.reports / "stacked", rep_folds)
    summary["stacked"] = {"macro_auroc": r.macro_auroc, "macro_map": r.macro_map,
                          "challenge_score": r.challenge_score}
    if cfg["test_manifest"] and work.stacked("test").is_file():
        test_truth = _manifest(cfg, test=True)
        final = PredictionMatrix.from_csv(work.stacked("test").read_text(encoding="utf-8"), "stacked")
        rt = write_evaluation(final, test_truth, work.reports / "stacked_test")
        summary["stacked_test"] = {"macro_auroc": rt.macro_auroc, "macro_map": rt.macro_map}
    atomic_write(work.reports / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _replica_truth(cfg: dict, m: LabelMatrix) -> LabelMatrix:
    row = {s: i for i, s in enumerate(m.sample_ids)}
    reps = _stack_replicas(cfg, m)
    y = m.to_array()[[row[r[1]] for r in reps]]
    return LabelMatrix.from_array([r[0] for r in reps], y, m.schema)


def cmd_run_all(args, cfg) -> int:
    work = Work(cfg["work_dir"])
    _require_paths(cfg, ["manifest"])
    work.root.mkdir(parents=True, exist_ok=True)
    atomic_write(work.root / "config.json", json.dumps(cfg, indent=2, sort_keys=True))
    ns = argparse.Namespace(out=None, arch=None, mode=None, fold=None, workers=args.workers,
                            preds_dir=None, spec=None, allow_degenerate=args.allow_degenerate,
                            stacker=None)
    cmd_split(ns, cfg)
    if int(cfg["upsample_threshold"]) > 0:
        cmd_upsample(ns, cfg)
    cmd_preprocess(ns, cfg)
    cmd_train(ns, cfg)
    cmd_predict(ns, cfg)
    cmd_stack_fit(ns, cfg)
    if cfg["test_manifest"]:
        cmd_stack_predict(ns, cfg)
    summary = _evaluate_run(cfg, work)
    best = max(summary["members"].values())
    print(f"stacked macro_auroc {summary['stacked']['macro_auroc']:.6f} (best member {best:.6f})")
    return EXIT_OK


# -- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retinastack", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="store_true", help="print package and file-format versions")
    sub = p.add_subparsers(dest="command")

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted key, JSON value)")
        sp.set_defaults(func=func)
        return sp

    sp = add("split", cmd_split, "stratified multi-label k-fold split")
    sp.add_argument("--manifest")
    sp.add_argument("--k", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = add("upsample", cmd_upsample, "plan augmented replicas for rare labels")
    sp.add_argument("--manifest")
    sp.add_argument("--threshold", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = add("preprocess", cmd_preprocess, "build feature tables")
    sp.add_argument("--arch")

    sp = add("train", cmd_train, "train fold members")
    sp.add_argument("--mode", choices=("detector", "classifier"))
    sp.add_argument("--arch")
    sp.add_argument("--fold", type=int)
    sp.add_argument("--workers", type=int, default=1)

    sp = add("predict", cmd_predict, "write member predictions")
    sp.add_argument("--mode", choices=("detector", "classifier"))
    sp.add_argument("--arch")

    sp = add("stack-fit", cmd_stack_fit, "fit the per-class logistic stacker")
    sp.add_argument("--preds-dir", help="stack external member CSVs instead of the run's members")
    sp.add_argument("--spec", help="ensemble spec JSON fixing member order")
    sp.add_argument("--out")
    sp.add_argument("--manifest")
    sp.add_argument("--allow-degenerate", action="store_true")

    sp = add("stack-predict", cmd_stack_predict, "apply the stacker")
    sp.add_argument("--stacker")
    sp.add_argument("--preds-dir")
    sp.add_argument("--out")

    sp = add("evaluate", cmd_evaluate, "AUROC / mAP report and ROC curves")
    sp.add_argument("--preds", required=True)
    sp.add_argument("--truth", help="manifest with true labels (default: config manifest)")
    sp.add_argument("--folds", help="fold CSV for macro averaging over folds")
    sp.add_argument("--out", help="output stem")

    sp = add("run-all", cmd_run_all, "run every stage")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--allow-degenerate", action="store_true")
    return p


def _cli_overrides(args) -> list[str]:
    """Translate direct flags into config overrides."""
    out = []
    for flag, key in (("manifest", "manifest"), ("k", "k"), ("seed", "seed"), ("threshold", "upsample_threshold")):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{key}={json.dumps(value)}")
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.version:
        print(f"retinastack {__version__}")
        for name, v in FORMAT_VERSIONS.items():
            print(f"{name} {v}")
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, list(args.overrides) + _cli_overrides(args))
        return args.func(args, cfg)
    except (TrainingDivergedError, NonFiniteError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
