"""Command-line orchestration of the three experiments.

Every command reads one JSON config (validated against ``CONFIG_SCHEMA``),
writes only under the output directory, and stamps each JSON artifact with
the config hash and seed. Exit codes: 0 success, 1 invalid input, 2 failure
while running.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema

from . import models as zoo
from .psychometrics import (FitError, HumanBaseline, PsychometricFit, fit_participants,
                            fit_psychometric, load_trials, plot_curves, proportions,
                            simulate_participants, write_trials)
from .stats import CONDITIONS, MODEL_LABELS, STRATEGIES, STRATEGY_LABELS, ComparisonRow, build_table
from .stimuli import (REGIONS, StimulusError, apply_mask, load_continuum, load_mask_boxes,
                      mask_spec, synth_continuum, synth_faces, write_face_dataset)
from .training import DatasetError, TrainConfig, TrainingError, load_manifest, train_head

log = logging.getLogger("psychocnn")

OK, INVALID, FAILED = 0, 1, 2
PROVENANCE_OF = {"object_based": "object_pretrained", "face_based": "face_pretrained"}

_train_props = {
    "batch_size": {"type": "integer", "minimum": 1},
    "learning_rate": {"type": "number", "exclusiveMinimum": 0},
    "epochs": {"type": "integer", "minimum": 1},
    "freeze_backbone": {"type": "boolean"},
    "random_crop": {"type": "boolean"},
    "horizontal_flip": {"type": "boolean"},
    "crop_scale": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
    "optimizer": {"enum": ["adam", "sgd"]},
}
_dataset = {
    "type": "object",
    "oneOf": [
        {"required": ["train", "val"]},
        {"required": ["synthetic"]},
    ],
    "properties": {
        "train": {"type": "string"},
        "val": {"type": "string"},
        "root": {"type": "string"},
        "synthetic": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"n_train": {"type": "integer", "minimum": 2},
                           "n_val": {"type": "integer", "minimum": 1},
                           "size": {"type": "integer", "minimum": 16},
                           "seed": {"type": "integer"}},
        },
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["models", "continuum"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "out": {"type": "string"},
        "input_size": {"type": "integer", "minimum": 16},
        "models": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name"],
                "additionalProperties": False,
                "properties": {
                    "name": {"enum": list(zoo.ARCHITECTURES)},
                    "strategy": {"enum": list(STRATEGIES)},
                    "id": {"type": "string", "pattern": r"^[A-Za-z0-9_.-]+$"},
                    "init": {"enum": ["random", "pretrained", "checkpoint", "imagenet"]},
                    "checkpoint": {"type": "string"},
                },
            },
        },
        "data": _dataset,
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {s: _dataset for s in STRATEGIES}
                          | {"train": {"type": "object", "properties": _train_props,
                                       "additionalProperties": False}},
        },
        "train": {"type": "object", "properties": _train_props, "additionalProperties": False},
        "continuum": {
            "type": "object",
            "additionalProperties": False,
            "oneOf": [{"required": ["dir"]}, {"required": ["synthetic"]}],
            "properties": {
                "dir": {"type": "string"},
                "pattern": {"type": "string"},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"n_levels": {"type": "integer", "minimum": 4},
                                   "size": {"type": "integer", "minimum": 16},
                                   "seed": {"type": "integer"}},
                },
            },
        },
        "masks": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "regions": {"type": "array", "items": {"enum": list(REGIONS)}, "minItems": 1},
                "boxes": {"type": "string"},
                "fill": {"oneOf": [{"enum": ["mean", "mean_gray", "black"]},
                                   {"type": "array", "items": {"type": "integer"},
                                    "minItems": 3, "maxItems": 3}]},
            },
        },
        "human": {
            "type": "object",
            "additionalProperties": False,
            "oneOf": [{"required": ["trials"]}, {"required": ["summary"]},
                      {"required": ["synthetic"]}],
            "properties": {
                "trials": {"type": "string"},
                "summary": {"type": "object", "required": ["mean", "sem", "n"],
                            "additionalProperties": False,
                            "properties": {"mean": {"type": "number"},
                                           "sem": {"type": "number", "minimum": 0},
                                           "n": {"type": "integer", "minimum": 2}}},
                "synthetic": {"type": "object", "additionalProperties": False,
                              "properties": {"participants": {"type": "integer", "minimum": 2},
                                             "reps": {"type": "integer", "minimum": 1},
                                             "seed": {"type": "integer"}}},
            },
        },
        "cam": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"layer": {"type": "string"},
                           "levels": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                           "target_class": {"type": "integer", "minimum": 0},
                           "alpha": {"type": "number", "minimum": 0, "maximum": 1}},
        },
        "bonferroni_m": {"type": "integer", "minimum": 1},
    },
}


class CliError(Exception):
    code = INVALID


class RunFailure(CliError):
    code = FAILED


# --- configuration -------------------------------------------------------

@dataclass
class ModelEntry:
    key: str
    name: str
    strategy: str
    init: str
    checkpoint: Path | None

    @property
    def label(self) -> str:
        return MODEL_LABELS[self.name]


class Config:
    """A validated config with paths resolved against the config file."""

    def __init__(self, doc: dict, base: Path, out: Path):
        self.doc = doc
        self.base = base
        self.out = out
        self.seed = int(doc.get("seed", 0))
        self.input_size = int(doc.get("input_size", 224))
        canonical = json.dumps({k: v for k, v in doc.items() if k != "out"}, sort_keys=True)
        self.sha256 = hashlib.sha256(canonical.encode()).hexdigest()
        self.models = []
        for m in doc["models"]:
            strategy = m.get("strategy", "object_based")
            init = m.get("init", "random")
            if init == "checkpoint" and "checkpoint" not in m:
                raise CliError(f"model {m['name']}: init 'checkpoint' needs a 'checkpoint' path")
            key = m.get("id", f"{m['name']}_{strategy}")
            ckpt = self.path(m["checkpoint"]) if "checkpoint" in m else None
            self.models.append(ModelEntry(key, m["name"], strategy, init, ckpt))
        keys = [m.key for m in self.models]
        if len(set(keys)) != len(keys):
            raise CliError(f"duplicate model ids {keys}; set 'id' to disambiguate")

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base / q

    def provenance(self) -> dict:
        return {"config_sha256": self.sha256, "seed": self.seed}

    def select(self, keys: list[str] | None) -> list[ModelEntry]:
        if not keys:
            return list(self.models)
        known = {m.key: m for m in self.models}
        missing = [k for k in keys if k not in known]
        if missing:
            raise CliError(f"unknown model id(s) {missing}; configured: {sorted(known)}")
        return [known[k] for k in keys]


def load_config(path: str | Path, seed: int | None = None, out: str | None = None) -> Config:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"  {'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise CliError(f"{path}: config does not match schema\n" + "\n".join(lines))
    doc = copy.deepcopy(doc)
    if seed is not None:
        doc["seed"] = seed
    base = path.resolve().parent
    if out is not None:
        out_dir = Path(out).resolve()
    else:
        out_dir = (base / doc.get("out", "runs")).resolve()
    return Config(doc, base, out_dir)


def _check_exists(p: Path, what: str) -> Path:
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


# --- output helpers ------------------------------------------------------

def _target(cfg: Config, rel: str) -> Path:
    p = (cfg.out / rel).resolve()
    if cfg.out != p and cfg.out not in p.parents:
        raise CliError(f"refusing to write outside the output directory: {p}")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _target_dir(cfg: Config, rel: str) -> Path:
    d = _target(cfg, f"{rel}/.")
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_json(cfg: Config, rel: str, doc: dict) -> Path:
    p = _target(cfg, rel)
    body = dict(doc) | cfg.provenance()
    p.write_text(json.dumps(body, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    return p


def write_text(cfg: Config, rel: str, text: str) -> Path:
    p = _target(cfg, rel)
    p.write_text(text)
    return p


# --- inputs --------------------------------------------------------------

def _dataset(cfg: Config, spec: dict, where: str):
    if "synthetic" in spec:
        s = spec["synthetic"]
        size = s.get("size", cfg.input_size)
        seed = s.get("seed", cfg.seed)
        n_train, n_val = s.get("n_train", 320), s.get("n_val", 80)
        pairs = synth_faces(n_train + n_val, seed=seed, size=size)
        root = _target_dir(cfg, where)
        train = write_face_dataset(pairs[:n_train], root / "train")
        val = write_face_dataset(pairs[n_train:], root / "val")
        return load_manifest(train), load_manifest(val, "val")
    root = cfg.path(spec["root"]) if "root" in spec else None
    train = _check_exists(cfg.path(spec["train"]), f"{where} training set")
    val = _check_exists(cfg.path(spec["val"]), f"{where} validation set")
    return load_manifest(train, "train", root), load_manifest(val, "val", root)


def _continuum(cfg: Config):
    spec = cfg.doc["continuum"]
    if "synthetic" in spec:
        s = spec["synthetic"]
        return synth_continuum(s.get("n_levels", 21), s.get("seed", cfg.seed),
                               s.get("size", cfg.input_size))
    directory = _check_exists(cfg.path(spec["dir"]), "continuum directory")
    if "pattern" in spec:
        return load_continuum(directory, spec["pattern"])
    return load_continuum(directory)


def _mask_specs(cfg: Config, regions: list[str] | None):
    spec = cfg.doc.get("masks", {})
    boxes = load_mask_boxes(cfg.path(spec["boxes"])) if "boxes" in spec else load_mask_boxes()
    fill = spec.get("fill", "mean")
    fill = tuple(fill) if isinstance(fill, list) else fill
    chosen = regions or spec.get("regions", list(REGIONS))
    return [mask_spec(r, boxes, fill) for r in chosen]


def _baseline(cfg: Config) -> tuple[HumanBaseline, list | None]:
    """Human baseline plus pooled (level, proportion) points when trials exist."""
    spec = cfg.doc.get("human")
    if spec is None:
        raise CliError("no human baseline configured ('human' section missing)")
    if "summary" in spec:
        s = spec["summary"]
        return HumanBaseline.from_summary(s["mean"], s["sem"], s["n"]), None
    if "synthetic" in spec:
        s = spec["synthetic"]
        trials = simulate_participants(s.get("participants", 50), reps=s.get("reps", 30),
                                       seed=s.get("seed", cfg.seed))
        write_trials(trials, _target(cfg, "human/trials.csv"))
    else:
        trials = load_trials(_check_exists(cfg.path(spec["trials"]), "human trials file"))
    baseline, _ = fit_participants(trials)
    pooled = [(lv, p) for lv, p, _ in proportions(trials)]
    return baseline, pooled


def _checkpoint_dir(cfg: Config, entry: ModelEntry) -> Path:
    return cfg.out / "checkpoints" / entry.key


def _load_trained(cfg: Config, entry: ModelEntry) -> zoo.ZooModel:
    d = _checkpoint_dir(cfg, entry)
    if not (d / zoo.MANIFEST).is_file():
        raise CliError(f"missing checkpoint for {entry.key}: {d / zoo.MANIFEST} "
                       "(run 'psychocnn transfer' first)")
    ck = zoo.load_checkpoint(d)
    return zoo.build_model(ck.spec, "from_checkpoint", ck)


def _train_config(cfg: Config, section: dict | None, **defaults) -> TrainConfig:
    values = dict(defaults) | dict(section or {})
    values["seed"] = cfg.seed
    allowed = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in values.items() if k in allowed})


# --- commands ------------------------------------------------------------

def cmd_pretrain(cfg: Config, args) -> int:
    """Desk-scale pretraining of every model whose init is 'pretrained'."""
    wanted = [m for m in cfg.select(args.model) if m.init == "pretrained"]
    if not wanted:
        raise CliError("no model uses init 'pretrained'")
    sets = cfg.doc.get("pretrain", {})
    data = {}
    for s in sorted({m.strategy for m in wanted}):
        if s not in sets:
            raise CliError(f"pretrain.{s} dataset not configured")
        data[s] = _dataset(cfg, sets[s], f"pretrain_data/{s}")
    tcfg = _train_config(cfg, sets.get("train"), epochs=60, freeze_backbone=False)
    failed = []
    for m in wanted:
        train, val = data[m.strategy]
        spec = zoo.ModelSpec(m.name, cfg.input_size, train.num_classes)
        try:
            model = zoo.build_model(spec, seed=cfg.seed)
            ck, rep = train_head(model, train, val, tcfg, PROVENANCE_OF[m.strategy])
        except Exception as exc:  # one model's failure must not abort the others
            log.error("pretraining %s failed: %s", m.key, exc)
            failed.append(m.key)
            continue
        zoo.save_checkpoint(ck, _target_dir(cfg, f"pretrained/{m.strategy}/{m.name}"))
        write_json(cfg, f"reports/{m.key}.pretrain.json", rep.to_dict(timing=args.timing))
    if failed:
        raise RunFailure(f"pretraining failed for {failed}")
    return OK


def _source_checkpoint(cfg: Config, m: ModelEntry) -> zoo.Checkpoint | None:
    if m.init == "random":
        return None
    if m.init == "checkpoint":
        return zoo.load_checkpoint(_check_exists(m.checkpoint, f"checkpoint for {m.key}"))
    if m.init == "imagenet":
        return zoo.torchvision_imagenet_checkpoint("alexnet" if m.name == "fe_alexnet" else m.name)
    d = cfg.out / "pretrained" / m.strategy / m.name
    if not (d / zoo.MANIFEST).is_file():
        raise CliError(f"missing pretrained checkpoint for {m.key}: {d} (run 'psychocnn pretrain')")
    return zoo.load_checkpoint(d)


def cmd_transfer(cfg: Config, args) -> int:
    entries = cfg.select(args.model)
    # fail fast: every input is resolved before any training starts
    train, val = _dataset(cfg, cfg.doc.get("data") or _missing("data"), "data")
    for m in entries:
        if m.init == "checkpoint":
            _check_exists(m.checkpoint / zoo.MANIFEST, f"checkpoint manifest for {m.key}")
        elif m.init == "pretrained":
            d = cfg.out / "pretrained" / m.strategy / m.name / zoo.MANIFEST
            _check_exists(d, f"pretrained checkpoint for {m.key}")
    tcfg = _train_config(cfg, cfg.doc.get("train"))
    spec_classes = train.num_classes
    failed = []
    for m in entries:
        spec = zoo.ModelSpec(m.name, cfg.input_size, spec_classes)
        try:
            source = _source_checkpoint(cfg, m)
            if source is None:
                model, copied, prov = zoo.build_model(spec, seed=cfg.seed), [], "randomly_initialized"
            else:
                model, copied = zoo.transfer_init(spec, source, seed=cfg.seed)
                prov = source.provenance
            ck, rep = train_head(model, train, val, tcfg, prov)
        except Exception as exc:  # one model's failure must not abort the others
            log.error("transfer for %s failed: %s", m.key, exc)
            failed.append(m.key)
            continue
        zoo.save_checkpoint(ck, _target_dir(cfg, f"checkpoints/{m.key}"))
        doc = rep.to_dict(timing=args.timing) | {"model": m.key, "provenance": prov,
                                                 "copied_tensors": copied}
        write_json(cfg, f"reports/{m.key}.train.json", doc)
        log.info("%s: best epoch %d, val accuracy %.3f", m.key, rep.best_epoch, rep.best_val_accuracy)
    if failed:
        raise RunFailure(f"transfer failed for {failed}")
    return OK


def _missing(section: str):
    raise CliError(f"config has no '{section}' section")


def _sweep(cfg: Config, entries: list[ModelEntry], condition: str, continuum) -> list[dict]:
    """Classify the continuum with each model; write one curve file per model."""
    docs = []
    for m in entries:
        model = _load_trained(cfg, m)
        points = zoo.classify_continuum(model, continuum)
        fit = fit_psychometric(points)
        doc = {"model": m.key, "architecture": m.name, "strategy": m.strategy,
               "condition": condition, "levels": [lv for lv, _ in points],
               "p_happy": [p for _, p in points], "fit": fit.to_dict()}
        write_json(cfg, f"curves/{m.key}__{condition}.json", doc)
        docs.append(doc)
    return docs


def _masked(continuum, spec):
    return continuum.map_images(lambda im: apply_mask(im, spec))


def _curve_entries(docs: list[dict], human: list | None = None):
    out = []
    if human:
        out.append(("Human", "human", human, fit_psychometric(human)))
    for d in docs:
        label = f"{MODEL_LABELS[d['architecture']]} ({STRATEGY_LABELS[d['strategy']]})"
        out.append((label, d["architecture"], list(zip(d["levels"], d["p_happy"])),
                    _fit_from(d["fit"])))
    return out


def _fit_from(d: dict) -> PsychometricFit:
    return PsychometricFit(d["mu"], d["sigma"], d["gamma"], d["lam"], d["sse"])


def _pooled_human(cfg: Config):
    try:
        return _baseline(cfg)[1]
    except CliError:
        return None


def cmd_curve(cfg: Config, args) -> int:
    docs = _sweep(cfg, cfg.select(args.model), "unmasked", _continuum(cfg))
    plot_curves(_curve_entries(docs, _pooled_human(cfg)), _target(cfg, "curves/unmasked.png"))
    for d in docs:
        print(f"{d['model']}\tpse={_pse_text(d)}")
    return OK


def _pse_text(doc: dict) -> str:
    pse = doc["fit"]["pse"]
    return "degenerate" if pse is None else f"{pse:.3f}"


def cmd_mask_eval(cfg: Config, args) -> int:
    continuum = _continuum(cfg)
    entries = cfg.select(args.model)
    human = _pooled_human(cfg)
    for spec in _mask_specs(cfg, args.region):
        docs = _sweep(cfg, entries, spec.region, _masked(continuum, spec))
        plot_curves(_curve_entries(docs, human), _target(cfg, f"curves/{spec.region}.png"),
                    title=f"{spec.region} masked")
        for d in docs:
            print(f"{d['model']}\t{spec.region}\tpse={_pse_text(d)}")
    return OK


def _cam_stimuli(cfg: Config, continuum):
    wanted = cfg.doc.get("cam", {}).get("levels", [0.0, 0.25, 0.5, 0.75, 1.0])
    chosen = []
    for w in wanted:
        i = min(range(len(continuum.levels)), key=lambda j: abs(continuum.levels[j] - w))
        chosen.append((f"{continuum.levels[i]:.0%}", continuum.images[i]))
    return chosen


def _write_cam(cfg: Config, entries: list[ModelEntry], continuum, rel: str, layer: str | None):
    from .attribution import cam_grid

    cam = cfg.doc.get("cam", {})
    rows = [(f"{m.label}\n{STRATEGY_LABELS[m.strategy]}", _load_trained(cfg, m)) for m in entries]
    return cam_grid(rows, _cam_stimuli(cfg, continuum), _target(cfg, rel),
                    layer=layer or cam.get("layer"), target_class=cam.get("target_class", zoo.HAPPY),
                    alpha=cam.get("alpha", 0.5))


def cmd_cam(cfg: Config, args) -> int:
    entries = cfg.select(args.model)
    if args.list_layers:
        for m in entries:
            model = zoo.build_model(zoo.ModelSpec(m.name, cfg.input_size))
            print(f"# {m.key} (default {zoo.last_conv_layer(model)})")
            print("\n".join(zoo.list_layers(model)))
        return OK
    continuum = _continuum(cfg)
    specs = _mask_specs(cfg, [args.region]) if args.region else []
    if specs:
        continuum = _masked(continuum, specs[0])
    name = f"cam/{args.region or 'unmasked'}.png"
    print(_write_cam(cfg, entries, continuum, name, args.layer))
    return OK


def cmd_fit_human(cfg: Config, args) -> int:
    if args.trials:
        cfg.doc["human"] = {"trials": str(Path(args.trials).resolve())}
    baseline, pooled = _baseline(cfg)
    write_json(cfg, "human/baseline.json", baseline.to_dict())
    if pooled:
        plot_curves(_curve_entries([], pooled), _target(cfg, "human/curve.png"))
    print(f"n={baseline.n} mean={baseline.mean:.3f} sem={baseline.sem:.3f} "
          f"excluded={len(baseline.excluded)}")
    return OK


def _rows(cfg: Config, docs: list[dict], baseline: HumanBaseline) -> list[ComparisonRow]:
    order = {m.key: i for i, m in enumerate(cfg.models)}
    docs = sorted(docs, key=lambda d: (STRATEGIES.index(d["strategy"]),
                                       CONDITIONS.index(d["condition"]), order[d["model"]]))
    return [ComparisonRow.compare(d["strategy"], d["condition"], d["architecture"],
                                  d["fit"]["pse"], baseline) for d in docs]


def _write_table(cfg: Config, rel_dir: str, docs: list[dict], baseline, m, title: str):
    report = build_table(_rows(cfg, docs, baseline), m=m, title=title)
    extra = cfg.provenance() | {"baseline": {"mean": baseline.mean, "sem": baseline.sem,
                                             "n": baseline.n}}
    write_text(cfg, f"{rel_dir}/report.json", report.to_json(**extra))
    write_text(cfg, f"{rel_dir}/report.txt", report.to_text())
    return report


def cmd_report(cfg: Config, args) -> int:
    baseline, _ = _baseline(cfg)
    keys = {m.key for m in cfg.models}
    docs = []
    for p in sorted((cfg.out / "curves").glob("*__*.json")):
        d = json.loads(p.read_text())
        if d.get("model") in keys:
            docs.append(d)
    if not docs:
        raise CliError(f"no curve files under {cfg.out / 'curves'} (run 'curve' or 'mask-eval')")
    m = args.m if args.m is not None else cfg.doc.get("bonferroni_m")
    report = _write_table(cfg, "report", docs, baseline, m, "PSE comparison with human observers")
    sys.stdout.write(report.to_text())
    return OK


def cmd_experiment(cfg: Config, args) -> int:
    which = args.which
    baseline, human = _baseline(cfg)
    m_flag = args.m if args.m is not None else cfg.doc.get("bonferroni_m")
    continuum = _continuum(cfg)
    entries = cfg.select(args.model)
    if which == 3:
        entries = [m for m in entries if m.name == "fe_alexnet"]
        if not entries:
            raise CliError("experiment 3 needs an FE-AlexNet model; none is configured")
    for m in entries:
        d = _checkpoint_dir(cfg, m)
        if not (d / zoo.MANIFEST).is_file():
            raise CliError(f"missing checkpoint for {m.key}: {d / zoo.MANIFEST}")
    write_json(cfg, "human/baseline.json", baseline.to_dict())

    if which in (1, 3):
        docs = _sweep(cfg, entries, "unmasked", continuum)
        if which == 1:
            plot_curves(_curve_entries(docs, human), _target(cfg, "exp1/psychometric.png"))
            for s in STRATEGIES:
                group = [m for m in entries if m.strategy == s]
                if group:
                    _write_cam(cfg, group, continuum, f"exp1/cam_{s}.png", None)
            _write_table(cfg, "exp1", docs, baseline, m_flag, "Experiment 1: unmasked continuum")
        else:
            exp3 = docs
    if which in (2, 3):
        masked_docs = []
        for spec in _mask_specs(cfg, None):
            mc = _masked(continuum, spec)
            docs = _sweep(cfg, entries, spec.region, mc)
            masked_docs += docs
            if which == 2:
                plot_curves(_curve_entries(docs, human), _target(cfg, f"exp2/psychometric_{spec.region}.png"),
                            title=f"{spec.region} masked")
                for s in STRATEGIES:
                    group = [m for m in entries if m.strategy == s]
                    if group:
                        _write_cam(cfg, group, mc, f"exp2/cam_{s}_{spec.region}.png", None)
        if which == 2:
            for s in STRATEGIES:
                part = [d for d in masked_docs if d["strategy"] == s]
                if part:
                    _write_table(cfg, f"exp2/{s}", part, baseline, m_flag,
                                 f"Experiment 2: masked continuum, {STRATEGY_LABELS[s]}")
        else:
            exp3 += masked_docs
    if which == 3:
        _experiment3_figures(cfg, exp3, human)
        _write_table(cfg, "exp3", exp3, baseline, m_flag, "Experiment 3: FE-AlexNet")
    print(cfg.out)
    return OK


def _experiment3_figures(cfg: Config, fe_docs: list[dict], human):
    """Overlay FE-AlexNet curves on any stored curves of the other models."""
    fe_keys = {d["model"] for d in fe_docs}
    for cond in sorted({d["condition"] for d in fe_docs}, key=CONDITIONS.index):
        stored = []
        for m in cfg.models:
            p = cfg.out / "curves" / f"{m.key}__{cond}.json"
            if m.key not in fe_keys and p.is_file():
                stored.append(json.loads(p.read_text()))
        ours = [d for d in fe_docs if d["condition"] == cond]
        plot_curves(_curve_entries(stored + ours, human), _target(cfg, f"exp3/psychometric_{cond}.png"),
                    title=f"FE-AlexNet, {cond}")


# --- entry point ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--model", action="append", help="restrict to a model id (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="psychocnn",
                                     description="Psychophysics-style evaluation of CNN classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="desk-scale pretraining")
    p.add_argument("--timing", action="store_true", help="include wall-clock time in reports")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transfer", parents=[common], help="train classifier heads")
    p.add_argument("--timing", action="store_true", help="include wall-clock time in reports")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("curve", parents=[common], help="sweep the clean continuum")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("cam", parents=[common], help="LayerCAM grid")
    p.add_argument("--layer", help="dotted layer name (default: last convolution)")
    p.add_argument("--list-layers", action="store_true", help="print eligible layer names")
    p.add_argument("--region", choices=REGIONS, help="mask this region first")
    p.set_defaults(func=cmd_cam)

    for name in ("mask-eval", "mask"):
        p = sub.add_parser(name, parents=[common], help="sweep masked continua")
        p.add_argument("--region", action="append", choices=REGIONS)
        p.set_defaults(func=cmd_mask_eval)

    p = sub.add_parser("fit-human", parents=[common], help="fit the human baseline")
    p.add_argument("--trials", help="trials CSV (overrides the config)")
    p.set_defaults(func=cmd_fit_human)

    p = sub.add_parser("report", parents=[common], help="PSE comparison table")
    p.add_argument("--m", type=int, help="Bonferroni family size")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("experiment", parents=[common], help="run experiment 1, 2 or 3")
    p.add_argument("which", type=int, choices=(1, 2, 3))
    p.add_argument("--m", type=int, help="Bonferroni family size")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "m", None) is not None and args.m < 1:
        print("error: --m must be >= 1", file=sys.stderr)
        return INVALID
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return args.func(cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DatasetError, StimulusError, zoo.ModelError, FitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID
    except (TrainingError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return FAILED


if __name__ == "__main__":
    sys.exit(main())
