"""Command-line interface.

Each subcommand loads its inputs, calls the library and writes its outputs
under ``--output-dir``.  Stage seeds are derived from the master seed
(``--seed`` or ``master_seed`` in the config) with the keys in
:data:`sancdifi.evalharness.SEED_KEYS`, and are recorded in each command's
metadata file.

Failures print one JSON line on stderr, e.g.
``{"error": "missing-input", "exit_code": 4, "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import evalharness as eh
from .attacks import embed_trigger, pgd_attack, poison_dataset
from .config import ConfigError, RunConfig, config_to_dict, load_config, quickstart_config
from .core import UNIT, ImageTensor, ParameterError, derive_seed
from .datagen import LabeledDataset, train_val_split
from .diffusion import PurifyConfig, purify
from .formats import FormatError, read_dataset, read_model, read_tensor, write_dataset, write_heatmap_pgm, \
    write_mask_pgm, write_model, write_pnm, write_tensor
from .models import ToyClassifier, ToyNoisePredictor
from .saliency import composite_mask, rise_saliency_maps, topk_classes
from .sancdifi import Diagnostics, sancdifi_purify, visible_masks
from .training import TrojanQualityError, train_classifier

log = logging.getLogger("sancdifi")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_INPUT = 4
EXIT_BAD_FORMAT = 5
EXIT_INVALID_VALUE = 6
EXIT_QUALITY = 7


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p, writes=True, config=True):
    if config:
        p.add_argument("--config", help="RunConfig JSON file (defaults when omitted)")
    p.add_argument("--seed", type=int, help="master seed; overrides master_seed in the config")
    if writes:
        p.add_argument("--output-dir", help="directory for all outputs (default: output_dir in the config)")


def build_parser():
    parser = _Parser(prog="sancdifi", description="Saliency-conditioned diffusion purification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("defaults", help="print the default RunConfig as JSON")
    p.add_argument("--quickstart", action="store_true", help="print the small smoke-test configuration instead")

    p = sub.add_parser("gen-data", help="generate train and validation glyph datasets")
    _add_common(p)
    p.add_argument("--samples", type=int, default=8, help="number of sample images exported as PPM")

    for name, what in (("train-clean", "clean classifier"), ("train-denoiser", "noise predictor")):
        p = sub.add_parser(name, help=f"train the {what}")
        _add_common(p)
        p.add_argument("--data", required=True, help="training dataset (.snds)")

    p = sub.add_parser("train-trojan", help="train a backdoored classifier")
    _add_common(p)
    p.add_argument("--data", required=True, help="training dataset (.snds)")
    p.add_argument("--attack", choices=("badnet", "invisible"), required=True)
    p.add_argument("--validation", help="validation dataset (.snds) for the quality gate")

    p = sub.add_parser("attack", help="apply a trigger or PGD to an image or dataset")
    _add_common(p)
    p.add_argument("--input", required=True, help="image (.snc) or dataset (.snds)")
    p.add_argument("--attack", choices=eh.ATTACKS, required=True)
    p.add_argument("--model", help="classifier (.snmw), required for PGD")
    p.add_argument("--label", type=int, help="true label of a single-image PGD input")

    p = sub.add_parser("saliency", help="RISE maps and the visible mask of one image")
    _add_common(p)
    p.add_argument("--input", required=True, help="image (.snc)")
    p.add_argument("--model", required=True, help="classifier (.snmw)")

    p = sub.add_parser("purify", help="purify one image or a dataset")
    _add_common(p)
    p.add_argument("--input", required=True, help="image (.snc) or dataset (.snds)")
    p.add_argument("--trojan", required=True, help="classifier queried for saliency (.snmw)")
    p.add_argument("--denoiser", required=True, help="noise predictor (.snmw)")
    p.add_argument("--diffpure", action="store_true", help="unconditioned purification instead of Sancdifi")
    p.add_argument("--t-stop", type=int, help="DiffPure depth (default: T1)")
    p.add_argument("--no-phase2", action="store_true", help="skip the complement-mask phase")
    p.add_argument("--dump-every", type=int, default=0, help="write every k-th chain state (single image)")

    for name in ("evaluate", "ablate"):
        p = sub.add_parser(name, help="run the experiment matrix" if name == "evaluate" else "run the ablation grid")
        _add_common(p)
        p.add_argument("--workers", type=int, default=1, help="processes used across replicates")
    return parser


# helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    if hasattr(args, "output_dir"):
        # the location is not part of the experiment, so reports never record it
        args.output_dir = args.output_dir or cfg.output_dir
        cfg.output_dir = None
        if not args.output_dir:
            raise UsageError("--output-dir is required when the config sets no output_dir")
    return cfg


def _require(path):
    if path is None or not os.path.isfile(path):
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _out(args, name):
    os.makedirs(args.output_dir, exist_ok=True)
    return os.path.join(args.output_dir, name)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _meta(cfg, command, **extra):
    return {"command": command, "master_seed": cfg.master_seed, **extra}


def _load_classifier(path):
    model = read_model(_require(path))
    if not isinstance(model, ToyClassifier):
        raise FormatError(f"{path} does not hold a classifier")
    return model


def _load_denoiser(path):
    model = read_model(_require(path))
    if not isinstance(model, ToyNoisePredictor):
        raise FormatError(f"{path} does not hold a noise predictor")
    return model


def _read_input(path):
    """``(images (B, H, W, C), labels or None, single)``; format decided by the magic bytes."""
    _require(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"SNDS":
        data = read_dataset(path)
        return data.images.astype(np.float64), data, False
    t = read_tensor(path)
    if t.domain != UNIT:
        raise FormatError("expected a unit-domain image tensor")
    return t.data[None].astype(np.float64), None, True


# commands


def cmd_defaults(args):
    cfg = quickstart_config() if args.quickstart else RunConfig()
    sys.stdout.write(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args):
    cfg = _config(args)
    spec = eh.dataset_spec(cfg, cfg.master_seed)
    train, validation = train_val_split(spec, cfg.dataset.val_per_class)
    write_dataset(_out(args, "train.snds"), train)
    write_dataset(_out(args, "validation.snds"), validation)
    lines = []
    for i in range(min(args.samples, len(train))):
        name = f"sample_{i:03d}_label{int(train.labels[i])}.ppm"
        write_pnm(_out(args, name), train.images[i])
        lines.append(name)
    with open(_out(args, "montage.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_json(_out(args, "gen-data.json"), _meta(cfg, "gen-data", data_seed=spec.seed, train=len(train),
                                                     validation=len(validation)))


def cmd_train_clean(args):
    cfg = _config(args)
    data = read_dataset(_require(args.data))
    seed = derive_seed(cfg.master_seed, eh.SEED_KEYS["clean classifier"])
    model = train_classifier(data, eh.classifier_train_config(cfg, seed))
    write_model(_out(args, "classifier.snmw"), model)
    _write_json(_out(args, "train-clean.json"), _meta(cfg, "train-clean", seed=seed, loss_curve=model.loss_curve_))


def cmd_train_trojan(args):
    cfg = _config(args)
    data = read_dataset(_require(args.data))
    validation = read_dataset(_require(args.validation)) if args.validation else None
    model = eh.train_victim(cfg, args.attack, data, validation, cfg.master_seed)
    trigger = eh.make_trigger(cfg, args.attack, cfg.master_seed)
    write_model(_out(args, f"trojan_{args.attack}.snmw"), model)
    _write_json(_out(args, f"trigger_{args.attack}.json"), trigger.to_dict())
    _write_json(_out(args, f"train-trojan_{args.attack}.json"), _meta(
        cfg, "train-trojan", attack=args.attack,
        seed=derive_seed(cfg.master_seed, eh.SEED_KEYS[f"{args.attack} trojan"]),
        attempts=getattr(model, "trojan_attempts_", []), loss_curve=model.loss_curve_))


def cmd_train_denoiser(args):
    cfg = _config(args)
    data = read_dataset(_require(args.data))
    model = eh.train_denoiser(cfg, data, cfg.master_seed)
    write_model(_out(args, "denoiser.snmw"), model)
    _write_json(_out(args, "train-denoiser.json"), _meta(
        cfg, "train-denoiser", seed=derive_seed(cfg.master_seed, eh.SEED_KEYS["denoiser"]),
        loss_curve=model.loss_curve_))


def cmd_attack(args):
    cfg = _config(args)
    X, data, single = _read_input(args.input)
    if args.attack == "pgd":
        if args.model is None:
            raise ParameterError("PGD needs --model")
        model = _load_classifier(args.model)
        if single:
            if args.label is None:
                raise ParameterError("single-image PGD needs --label")
            y = np.array([args.label])
        else:
            y = data.labels
        p = cfg.attack.pgd
        adv = pgd_attack(model, X, y, p.epsilon, p.steps, p.step_size)
        out = adv if single else LabeledDataset(adv, data.labels, data.n_classes, data.split)
        meta = {"epsilon": p.epsilon, "steps": p.steps, "step_size": p.step_size}
    else:
        trigger = eh.make_trigger(cfg, args.attack, cfg.master_seed)
        if single:
            out = embed_trigger(X, trigger)
        else:
            out = poison_dataset(data, trigger, mode="all")
        meta = {"trigger": trigger.to_dict()}
    if single:
        write_tensor(_out(args, "attacked.snc"), ImageTensor(out[0].astype(np.float32), UNIT))
        write_pnm(_out(args, "attacked.ppm"), out[0])
    else:
        write_dataset(_out(args, "attacked.snds"), out)
    _write_json(_out(args, "attack.json"), _meta(cfg, "attack", attack=args.attack, **meta))


def cmd_saliency(args):
    cfg = _config(args)
    X, _, single = _read_input(args.input)
    if not single:
        raise ParameterError("saliency takes a single image (.snc)")
    model = _load_classifier(args.model)
    scfg = eh.sancdifi_config(cfg, cfg.master_seed)
    x = X[0]
    probs = model.predict_proba(x[None])[0]
    r = min(scfg.r, probs.size)
    classes = topk_classes(probs, r)
    maps = rise_saliency_maps(model, x, scfg.rise)
    A = composite_mask(maps[classes], scfg.d)
    np.save(_out(args, "saliency_maps.npy"), maps.astype(np.float32))
    for k in range(maps.shape[0]):
        write_heatmap_pgm(_out(args, f"saliency_class{k}.pgm"), maps[k])
    write_mask_pgm(_out(args, "mask.pgm"), A)
    write_tensor(_out(args, "mask.snc"), ImageTensor(A[..., None].astype(np.float32), UNIT))
    _write_json(_out(args, "saliency.json"), _meta(
        cfg, "saliency", seed=scfg.seed, classes=classes, r_used=r, probabilities=probs,
        mask_density=float(A.mean()), n_masks=scfg.n_masks, d=scfg.d))


def _chain_dump(args, every, prefix):
    if every <= 0:
        return None, []
    names = []

    def callback(t, x_signed):
        if t % every == 0:
            img = np.clip((x_signed[0] + 1.0) / 2.0, 0.0, 1.0)
            stem = f"chain/{prefix}_t{t:04d}"
            os.makedirs(_out(args, "chain"), exist_ok=True)
            write_tensor(_out(args, stem + ".snc"), ImageTensor(x_signed[0].astype(np.float32), "signed"))
            write_pnm(_out(args, stem + ".ppm"), img)
            names.append(stem + ".ppm")
    return callback, names


def cmd_purify(args):
    cfg = _config(args)
    X, data, single = _read_input(args.input)
    denoiser = _load_denoiser(args.denoiser)
    classifier = _load_classifier(args.trojan)
    scfg = eh.sancdifi_config(cfg, cfg.master_seed)
    every = args.dump_every if single else 0
    montage = []
    meta = _meta(cfg, "purify", seed=scfg.seed, sancdifi=scfg.to_dict())
    if args.diffpure:
        t_stop = scfg.T1 if args.t_stop is None else args.t_stop
        pc = PurifyConfig(scfg.schedule, t_stop, scfg.seed, scfg.final_step_noise, stream="sancdifi/phase1")
        cb, montage = _chain_dump(args, every, "diffpure")
        out = purify(X, np.zeros(X.shape[1:3]), pc, denoiser, cb)
        A = np.zeros(X.shape[:3], np.uint8)
        meta.update(defense="diffpure", t_stop=t_stop)
    else:
        if every:
            diag = Diagnostics(seed=scfg.seed)
            A = visible_masks(X, classifier, scfg, diag)
            cb1, m1 = _chain_dump(args, every, "phase1")
            out = purify(X, A, scfg.phase(1), denoiser, cb1)
            montage += m1
            if not args.no_phase2 and scfg.T2 > 0:
                cb2, m2 = _chain_dump(args, every, "phase2")
                out = purify(out, 1 - A, scfg.phase(2), denoiser, cb2)
                montage += m2
            diag.steps = {"phase1": scfg.T1, "phase2": 0 if args.no_phase2 else scfg.T2}
            diag.mask_density = [float(a.mean()) for a in A.reshape(A.shape[0], -1)]
        else:
            out, A, diag = sancdifi_purify(X, classifier, denoiser, scfg, second_phase=not args.no_phase2)
        d = diag.to_dict()
        d.pop("timings", None)  # wall-clock times would break byte-identical reruns
        meta.update(defense="sancdifi_no_phase2" if args.no_phase2 else "sancdifi", diagnostics=d)
    meta["predictions"] = classifier.predict(out)
    if single:
        write_tensor(_out(args, "purified.snc"), ImageTensor(out[0].astype(np.float32), UNIT))
        write_pnm(_out(args, "purified.ppm"), out[0])
        write_pnm(_out(args, "input.ppm"), X[0])
        write_mask_pgm(_out(args, "mask.pgm"), A[0])
    else:
        write_dataset(_out(args, "purified.snds"), LabeledDataset(out, data.labels, data.n_classes, data.split))
    if montage:
        with open(_out(args, "montage.txt"), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(["input.ppm", *montage, "purified.ppm"]) + "\n")
    _write_json(_out(args, "purify.json"), meta)


def _run_bundle(args, ablate):
    cfg = _config(args)
    bundle = eh.ablation_suite(cfg, args.workers) if ablate else eh.run_matrix(cfg, workers=args.workers)
    bundle.write(args.output_dir, "ablation" if ablate else "metrics")
    if bundle.errors:
        log.warning("%d cell(s) failed; see the report", len(bundle.errors))


def cmd_evaluate(args):
    _run_bundle(args, False)


def cmd_ablate(args):
    _run_bundle(args, True)


COMMANDS = {
    "defaults": cmd_defaults,
    "gen-data": cmd_gen_data,
    "train-clean": cmd_train_clean,
    "train-trojan": cmd_train_trojan,
    "train-denoiser": cmd_train_denoiser,
    "attack": cmd_attack,
    "saliency": cmd_saliency,
    "purify": cmd_purify,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def _fail(kind, code, message):
    line = json.dumps({"error": kind, "exit_code": code, "message": " ".join(str(message).split())})
    sys.stderr.write(line + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except ConfigError as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _fail("missing-input", EXIT_MISSING_INPUT, exc)
    except FormatError as exc:
        return _fail("format", EXIT_BAD_FORMAT, exc)
    except TrojanQualityError as exc:
        return _fail("trojan-quality", EXIT_QUALITY, exc)
    except (ParameterError, ValueError) as exc:
        return _fail("invalid-value", EXIT_INVALID_VALUE, exc)
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        return _fail("internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")
    return EXIT_OK


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
