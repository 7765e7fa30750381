"""Pipeline stages shared by the command line and the test harness.

Stage outputs live under ``out_dir``::

    encoders.ckpt   vision, text and auxiliary vision encoder
    denoiser.ckpt   TinyNet weights plus the null conditioning vector
    editor.ckpt     region predictor and semantic projector
    *.csv           one row per training epoch
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, imageio
from .config import Config
from .diffusion import (
    DenoiserTrainer,
    DiffusionSchedule,
    GuidanceConfig,
    TinyNet,
    edit_batch,
    write_trajectory,
)
from .encoders import (
    ContrastivePretrainer,
    InstructionEncoder,
    TextEncoder,
    VisionEncoder,
    encode_caption,
    encode_image,
    encode_instruction,
)
from .errors import ConfigError, ContractError, DependencyError, FormatError
from .language import (
    EMPTY_CAPTION,
    Instruction,
    apply_instruction,
    describe,
    parse_instruction,
    propose_instruction,
)
from .metrics import MetricReport, edit_metrics, mean_report
from .objectives import EditBundle, EditorTrainer
from .world import (
    ImageSample,
    generate_corpus,
    hash64,
    object_masks,
    oracle_edit,
    read_corpus,
    read_edits,
    recover_scene,
    write_corpus,
    write_edits,
)

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": {},
    "no_sem_align": {"alpha": 0.0},
    "no_clip_g": {"lambda_g": 0.0},
    "no_clip_d": {"lambda_d": 0.0},
    "no_clip_s": {"lambda_s": 0.0},
}


def _out(cfg: Config) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _schedule(cfg: Config) -> DiffusionSchedule:
    return DiffusionSchedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.train_steps, cfg.eta)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path.name}; run `{stage}` first")
    return path


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def _train_dir(cfg):
    return Path(cfg.data_dir) / "train"


def _eval_dir(cfg):
    return Path(cfg.data_dir) / "eval"


def instruction_seed(seed: int, sample_id: int, split: str) -> int:
    return hash64("instruction", split, seed, sample_id) % (2**32)


def data_gen(cfg: Config) -> Path:
    """Write the training corpus and the eval split with one oracle edit per image."""
    root = Path(cfg.data_dir)
    if root.exists() and any(root.iterdir()):
        if not cfg.force:
            raise ContractError(f"{root} is not empty; pass --force to overwrite")
        shutil.rmtree(root)
    samples = generate_corpus(cfg.train_count + cfg.eval_count, cfg.seed)
    train, held = samples[:cfg.train_count], samples[cfg.train_count:]
    write_corpus(_train_dir(cfg), train)
    write_corpus(_eval_dir(cfg), held)
    edits = []
    for s in held:
        caption = describe(s.scene)
        ins = propose_instruction(caption, s.scene, instruction_seed(cfg.seed, s.id, "eval"))
        edits.append(oracle_edit(s, ins, cfg.seed))
    write_edits(_eval_dir(cfg), held, edits)
    log.info("wrote %d training and %d eval images to %s", len(train), len(held), root)
    return root


def load_train(cfg: Config, count: int | None = None) -> list[ImageSample]:
    d = _train_dir(cfg)
    _require(d / "corpus.idx", "data-gen")
    samples = read_corpus(d)
    return samples[:count] if count else samples


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


@dataclass
class Encoders:
    vision: VisionEncoder
    text: TextEncoder
    aux: VisionEncoder
    instruction: InstructionEncoder

    def null_cond(self) -> np.ndarray:
        return encode_caption(self.text, EMPTY_CAPTION)


def pretrain(cfg: Config) -> Path:
    samples = load_train(cfg)
    X = np.stack([s.pixels for s in samples])
    captions = [describe(s.scene) for s in samples]
    runs = {}
    for name, seed in (("main", cfg.seed), ("aux", cfg.aux_seed)):
        est = ContrastivePretrainer(d=cfg.d, depth=cfg.depth, epochs=cfg.pretrain_epochs,
                                    batch_size=cfg.pretrain_batch, lr=cfg.pretrain_lr, seed=seed)
        runs[name] = est.fit(X, captions, callback=lambda e, l, n=name: log.info("pretrain %s epoch %d loss %.4f",
                                                                                   n, e, l))
    out = _out(cfg)
    state = {**runs["main"].vision_.state_dict("vision."), **runs["main"].text_.state_dict("text."),
             **runs["aux"].vision_.state_dict("aux.")}
    checkpoint.save(out / "encoders.ckpt", state)
    _write_csv(out / "pretrain.csv", ("epoch", "loss", "aux_loss"),
               [(i, repr(a), repr(b)) for i, (a, b) in enumerate(zip(runs["main"].history_, runs["aux"].history_))])
    return out / "encoders.ckpt"


def load_encoders(cfg: Config) -> Encoders:
    state = checkpoint.load(_require(Path(cfg.out_dir) / "encoders.ckpt", "pretrain"))
    vision = VisionEncoder(cfg.d, depth=cfg.depth)
    text = TextEncoder(cfg.d, depth=cfg.depth)
    aux = VisionEncoder(cfg.d, depth=cfg.depth)
    vision.load_state_dict(state, "vision.").freeze()
    text.load_state_dict(state, "text.").freeze()
    aux.load_state_dict(state, "aux.").freeze()
    return Encoders(vision, text, aux, InstructionEncoder.from_text_encoder(text))


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------


def train_denoiser(cfg: Config) -> Path:
    enc = load_encoders(cfg)
    samples = load_train(cfg, cfg.denoiser_count)
    X = np.stack([s.pixels for s in samples])
    cond = encode_caption(enc.text, [describe(s.scene) for s in samples])
    trainer = DenoiserTrainer(hidden=cfg.denoiser_hidden, epochs=cfg.denoiser_epochs, batch_size=cfg.denoiser_batch,
                              lr=cfg.denoiser_lr, p_uncond=cfg.p_uncond, T=cfg.T, beta_start=cfg.beta_start,
                              beta_end=cfg.beta_end, train_steps=cfg.train_steps, codec="identity",
                              seed=cfg.seed)
    trainer.fit(X, cond, enc.null_cond(), [object_masks(s.scene) for s in samples],
                callback=lambda e, l: log.info("denoiser epoch %d loss %.2f", e, l))
    out = _out(cfg)
    checkpoint.save(out / "denoiser.ckpt", {**trainer.model_.state_dict("net."), "null_cond": trainer.null_cond_})
    _write_csv(out / "denoiser.csv", ("epoch", "loss"),
               [("init", repr(trainer.initial_loss_))] + [(i, repr(v)) for i, v in enumerate(trainer.history_)])
    return out / "denoiser.ckpt"


def load_denoiser(cfg: Config) -> tuple[TinyNet, np.ndarray]:
    state = checkpoint.load(_require(Path(cfg.out_dir) / "denoiser.ckpt", "train-denoiser"))
    if "null_cond" not in state:
        raise FormatError("denoiser checkpoint lacks the null conditioning vector")
    net = TinyNet(3, cfg.denoiser_hidden, cfg.d, cfg.T, schedule=_schedule(cfg))
    net.load_state_dict(state, "net.")
    return net.freeze(), state["null_cond"]


# ---------------------------------------------------------------------------
# editor
# ---------------------------------------------------------------------------


def make_bundles(enc: Encoders, samples, instructions) -> list[EditBundle]:
    """Features for (image, instruction) pairs; target captions come from the grammar."""
    X = np.stack([s.pixels for s in samples])
    t_o = [describe(s.scene) for s in samples]
    t_e = [apply_instruction(c, ins) for c, ins in zip(t_o, instructions)]
    I, F = encode_image(enc.vision, X)
    F_ins, keep = encode_instruction(enc.instruction, [ins.text for ins in instructions])
    T_o, T_e = encode_caption(enc.text, t_o), encode_caption(enc.text, t_e)
    return [EditBundle(X[i], instructions[i].text, t_o[i].text, t_e[i].text, F[i], I[i], F_ins[i], keep[i],
                       T_o[i], T_e[i]) for i in range(len(samples))]


def training_bundles(cfg: Config, enc: Encoders, count: int) -> list[EditBundle]:
    samples = load_train(cfg, count)
    instructions = [propose_instruction(describe(s.scene), s.scene, instruction_seed(cfg.seed, s.id, "train"))
                    for s in samples]
    return make_bundles(enc, samples, instructions)


def editor_trainer(cfg: Config, seed: int | None = None, **weights) -> EditorTrainer:
    params = dict(d=cfg.d, epochs=cfg.editor_epochs, batch_size=cfg.editor_batch, lr=cfg.editor_lr, K=cfg.K,
                  w_cfg=cfg.w_cfg, threshold=cfg.threshold, lambda_g=cfg.lambda_g, lambda_d=cfg.lambda_d,
                  lambda_s=cfg.lambda_s, alpha=cfg.alpha, beta=cfg.beta, T=cfg.T, beta_start=cfg.beta_start,
                  beta_end=cfg.beta_end, train_steps=cfg.train_steps, seed=cfg.seed if seed is None else seed)
    params.update(weights)
    return EditorTrainer(**params)


def train_editor(cfg: Config, out_dir=None, seed: int | None = None, count: int | None = None,
                 bundles=None, **weights) -> Path:
    """Fit the region predictor; ``weights`` override loss weights (used by ablations)."""
    enc = load_encoders(cfg)
    net, null = load_denoiser(cfg)
    if bundles is None:
        bundles = training_bundles(cfg, enc, count or cfg.editor_count)
    out = Path(out_dir) if out_dir is not None else _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    trainer = editor_trainer(cfg, seed, **weights)

    def progress(epoch, report, skipped):
        log.info("editor epoch %d total %.4f area %.3f skipped %d", epoch, report.total, report.mask_area, skipped)

    trainer.fit(bundles, enc.vision, net, null, log_path=out / "editor.csv", callback=progress)
    checkpoint.save(out / "editor.ckpt", trainer.state_dict())
    return out / "editor.ckpt"


def load_editor(cfg: Config, path=None) -> EditorTrainer:
    path = Path(path) if path is not None else Path(cfg.out_dir) / "editor.ckpt"
    return editor_trainer(cfg).load_state_dict(checkpoint.load(_require(path, "train-editor")))


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------


@dataclass
class EditResult:
    X_src: np.ndarray
    X_res: np.ndarray
    mask: np.ndarray
    instruction: str
    t_o: str
    t_e: str
    report: MetricReport
    run: object = None


class Editor:
    """Frozen end-to-end editing path: caption, target caption, region, sampler."""

    def __init__(self, cfg: Config, editor_path=None):
        self.cfg = cfg
        self.enc = load_encoders(cfg)
        self.net, self.null = load_denoiser(cfg)
        self.editor = load_editor(cfg, editor_path)
        self.schedule = _schedule(cfg)
        self.guidance = GuidanceConfig(cfg.w_cfg, self.null)

    def edit_many(self, images, instructions, seeds, oracle_masks=None, force_empty=False,
                  record=False) -> list[EditResult]:
        captions = [describe(recover_scene(X)) for X in images]
        instructions = [i if isinstance(i, Instruction) else parse_instruction(i) for i in instructions]
        targets = [apply_instruction(c, ins) for c, ins in zip(captions, instructions)]
        X = np.stack(images)
        I, F = encode_image(self.enc.vision, X)
        A, _ = encode_image(self.enc.aux, X)
        F_ins, keep = encode_instruction(self.enc.instruction, [i.text for i in instructions])
        T_o = encode_caption(self.enc.text, captions)
        T_e = encode_caption(self.enc.text, targets)
        preds = self.editor.predict(F, F_ins, keep)
        masks = np.stack([p.pixel_mask for p in preds]).astype(np.float64)
        if force_empty:
            masks[:] = 0.0
        runs = edit_batch(X, T_e, masks, self.net, self.schedule, self.guidance, seeds, eps_mode=self.cfg.eps_mode,
                          record=record)
        X_res = np.stack([r.X_res for r in runs])
        I_res, _ = encode_image(self.enc.vision, X_res)
        A_res, _ = encode_image(self.enc.aux, X_res)
        out = []
        for i, run in enumerate(runs):
            oracle = None if oracle_masks is None else oracle_masks[i]
            rep = edit_metrics(X[i], X_res[i], I[i], I_res[i], A[i], A_res[i], T_o[i], T_e[i], masks[i], oracle)
            out.append(EditResult(X[i], X_res[i], masks[i].astype(np.uint8), instructions[i].text, captions[i].text,
                                  targets[i].text, rep, run))
        return out


def edit(cfg: Config, image_path, instruction: str, output=None) -> dict:
    """Edit one PPM image; writes result, overlay and mask files plus one JSON line."""
    ins = parse_instruction(instruction)
    X = imageio.read_ppm(image_path)
    editor = Editor(cfg)
    res = editor.edit_many([X], [ins], [cfg.edit_seed], record=cfg.trajectory)[0]
    prefix = Path(output) if output is not None else _out(cfg) / "edits" / Path(image_path).stem
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {
        "result": f"{prefix}.edited.ppm",
        "overlay": f"{prefix}.overlay.ppm",
        "mask": f"{prefix}.mask.pbm",
    }
    imageio.write_ppm(paths["result"], res.X_res)
    imageio.write_ppm(paths["overlay"], imageio.mask_overlay(res.X_src, res.mask))
    imageio.write_pbm(paths["mask"], res.mask)
    if cfg.trajectory:
        paths["trajectory"] = f"{prefix}.traj"
        write_trajectory(paths["trajectory"], res.run)
    record = {"source": str(image_path), **paths, "instruction": res.instruction, "t_o": res.t_o, "t_e": res.t_e,
              "threshold": cfg.threshold, "seed": cfg.edit_seed,
              **{k: v for k, v in res.report.as_dict().items() if k not in ("iou", "random_iou")}}
    with (prefix.parent / "edits.jsonl").open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return record


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def load_eval(cfg: Config, limit: int = 0):
    d = _eval_dir(cfg)
    _require(d / "edits.idx", "data-gen")
    samples = read_corpus(d)
    edits = read_edits(d)
    if limit:
        samples = samples[:limit]
    return samples, [edits[s.id] for s in samples]


def evaluate(cfg: Config, editor_path=None, out_dir=None, limit: int | None = None, batch: int = 16,
             force_empty: bool = False) -> dict:
    """Run the edit path over the eval split and score every example against its oracle."""
    samples, edits = load_eval(cfg, cfg.eval_limit if limit is None else limit)
    editor = Editor(cfg, editor_path)
    results = []
    for i in range(0, len(samples), batch):
        chunk = slice(i, i + batch)
        results += editor.edit_many([s.pixels for s in samples[chunk]], [e.instruction for e in edits[chunk]],
                                    [cfg.edit_seed + j for j in range(i, i + len(samples[chunk]))],
                                    oracle_masks=[e.mask for e in edits[chunk]], force_empty=force_empty)
    out = Path(out_dir) if out_dir is not None else _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    names = MetricReport.names()
    _write_csv(out / "eval.csv", ["id", "instruction", "op"] + names + ["unmasked_l1"],
               [[s.id, r.instruction, e.instruction.op] + [repr(getattr(r.report, n)) for n in names]
                + [repr(unmasked_l1(r))] for s, e, r in zip(samples, edits, results)])
    summary = mean_report([r.report for r in results])
    summary["max_unmasked_l1"] = max(unmasked_l1(r) for r in results)
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def unmasked_l1(res: EditResult) -> float:
    """Mean absolute change over pixels the mask leaves alone."""
    keep = res.mask == 0
    if not keep.any():
        return 0.0
    return float(np.abs(res.X_res[keep] - res.X_src[keep]).mean())


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------


def ablate(cfg: Config) -> list[dict]:
    """Retrain the editor with each loss term switched off, for every ablation seed.

    Writes ``ablation_runs.csv`` (one row per run) and ``ablation.csv``
    (one row per configuration, averaged over seeds).
    """
    names = [n.strip() for n in cfg.ablation_configs.split(",") if n.strip()] or list(ABLATIONS)
    unknown = sorted(set(names) - set(ABLATIONS))
    if unknown:
        raise ConfigError(f"unknown ablation configs {unknown}; choose from {sorted(ABLATIONS)}")
    root = _out(cfg) / "ablation"
    enc = load_encoders(cfg)
    count = cfg.ablation_count or cfg.editor_count
    bundles = training_bundles(cfg, enc, count)
    limit = cfg.ablation_eval or cfg.eval_limit
    keys = ("iou", "clip_dir", "clip_out", "area", "l1", "clip_i", "dino", "random_iou")
    rows = []
    for name in names:
        weights = ABLATIONS[name]
        for seed in cfg.seeds:
            run_dir = root / f"{name}-seed{seed}"
            ckpt = train_editor(cfg, out_dir=run_dir, seed=seed, bundles=bundles, **weights)
            summary = evaluate(cfg, editor_path=ckpt, out_dir=run_dir, limit=limit)
            rows.append({"config": name, "seed": seed, **{k: summary[k] for k in keys}})
            log.info("ablation %s seed %d: iou %.3f clip_dir %.3f area %.3f", name, seed, summary["iou"],
                     summary["clip_dir"], summary["area"])
    _write_csv(root / "ablation_runs.csv", ("config", "seed") + keys,
               [[r["config"], r["seed"]] + [repr(r[k]) for k in keys] for r in rows])
    table = []
    for name in names:
        mine = [r for r in rows if r["config"] == name]
        table.append({"config": name, **{k: float(np.mean([r[k] for r in mine])) for k in keys}})
    _write_csv(root / "ablation.csv", ("config",) + keys, [[t["config"]] + [repr(t[k]) for k in keys] for t in table])
    return table
