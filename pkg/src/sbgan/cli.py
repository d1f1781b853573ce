"""Command line entry points.

Every command takes a JSON config plus ``--set section.key=value`` overrides.
Training commands checkpoint on an interval and support ``--resume``, which
refuses to continue under a different config and rewinds the metrics CSV to
the checkpointed step so an interrupted run ends up byte-identical to an
uninterrupted one. Failures print a single ``ERROR:<code>: message`` line
and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from . import data, end2end, evaluation, imgsynth, seggen
from .config import RunConfig, apply_overrides, config_hash, load_with_overrides
from .utils import (TAG_DATA, TAG_EVAL, TAG_GUMBEL, TAG_INIT, TAG_LATENT,
                    derive_seed, torch_generator)

SEG_FIELDS = ("step", "stage", "alpha", "critic_loss", "gen_loss", "gp",
              "hist_kl")
SPADE_FIELDS = ("step", "d_loss", "g_adv", "perceptual", "feat_match")
FT_FIELDS = ("step", "d2_loss", "d_spd_loss", "sb_critic_loss", "g_uncond",
             "g_spd", "g_sb", "g_total")
ABLATION_FIELDS = ("setting", "fid", "hist_kl", "steps", "seed")


# ---------------------------------------------------------------------------
# model construction (seeded so every command rebuilds identical weights)

def build_seg_models(cfg: RunConfig):
    sched = cfg.seg_schedule()
    torch.manual_seed(derive_seed(cfg.seed, TAG_INIT, 0))
    gen = seggen.SegGenerator(
        cfg.world.num_classes, sched.stage_resolutions,
        latent_dim=cfg.seg.latent_dim, base_channels=cfg.seg.base_channels,
        min_channels=cfg.seg.min_channels)
    critic = seggen.SegCritic(
        cfg.world.num_classes, sched.stage_resolutions,
        base_channels=cfg.seg.base_channels,
        min_channels=cfg.seg.min_channels)
    return gen, critic


def build_spade_models(cfg: RunConfig):
    torch.manual_seed(derive_seed(cfg.seed, TAG_INIT, 1))
    gen = imgsynth.SpadeGenerator(
        cfg.world.num_classes, cfg.resolution(),
        base_channels=cfg.spade.base_channels,
        min_channels=cfg.spade.min_channels, hidden=cfg.spade.hidden)
    disc = imgsynth.CondDiscriminator(
        cfg.world.num_classes, base_channels=cfg.spade.disc_channels,
        n_layers=cfg.spade.disc_layers)
    return gen, disc


def build_d2(cfg: RunConfig):
    torch.manual_seed(derive_seed(cfg.seed, TAG_INIT, 2))
    return end2end.UncondDiscriminator(
        base_channels=cfg.finetune.d2_channels,
        n_layers=cfg.finetune.d2_layers)


def perc_extractor(cfg: RunConfig):
    return imgsynth.SurrogateFeatureExtractor(seed=cfg.spade.perc_seed)


def build_embedder(cfg: RunConfig):
    return evaluation.SurrogateEmbedder(seed=cfg.eval.embed_seed)


def _check_dataset(cfg: RunConfig, meta: dict, data_dir) -> None:
    want = (cfg.world.num_classes, cfg.world.height, cfg.world.width)
    got = (meta["num_classes"], meta["height"], meta["width"])
    if want != got:
        raise ValueError(
            f"config expects {want[0]} classes at {want[1]}x{want[2]} but "
            f"dataset {data_dir} holds {got[0]} classes at {got[1]}x{got[2]}")


def _prepare_restart(ckpt_path: Path, csv_path: Path, force: bool) -> None:
    if ckpt_path.exists():
        if not force:
            raise FileExistsError(
                f"{ckpt_path} already exists; pass --resume to continue it "
                f"or --force to start over")
        ckpt_path.unlink()
        if csv_path.exists():
            csv_path.unlink()


def _sample_pairs(g_sb, g_spd, gumbel_cfg, n: int, seed: int,
                  batch_size: int = 64):
    """Deterministic (labels, images) batches from the composed pipeline."""
    labs, imgs = [], []
    done = 0
    i = 0
    with torch.no_grad():
        while done < n:
            b = min(batch_size, n - done)
            z = torch.randn(b, g_sb.latent_dim,
                            generator=torch_generator(
                                derive_seed(seed, TAG_LATENT, i)))
            lab, img = end2end.compose_generate(
                g_sb, g_spd, z, gumbel_cfg,
                seed=derive_seed(seed, TAG_GUMBEL, i))
            labs.append(lab.numpy())
            imgs.append(img.numpy())
            done += b
            i += 1
    labels = np.concatenate(labs, axis=0)[:n]
    images = np.concatenate(imgs, axis=0)[:n].transpose(0, 2, 3, 1)
    return labels, images


def _layout_grid(gen, cfg: RunConfig, path: Path, n: int = 16) -> None:
    gen.set_stage(gen.n_stages - 1, 1.0)
    maps = end2end.sample_layouts(gen, cfg.gumbel_config(), n,
                                  derive_seed(cfg.seed, TAG_EVAL, 999))
    rgb = data.render_palette(maps, cfg.world_spec().class_colors)
    data.save_image_grid(rgb.astype(np.float32) / 255.0, path)


# ---------------------------------------------------------------------------
# commands

def cmd_make_toy_data(args) -> int:
    cfg = load_with_overrides(args.config, args.overrides)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(
            f"output directory {out} is not empty; pass --force to overwrite")
    spec = cfg.world_spec()
    train = data.generate_toy_dataset(
        spec, cfg.world.train_samples, derive_seed(cfg.seed, TAG_DATA, 0),
        split="train")
    val = data.generate_toy_dataset(
        spec, cfg.world.val_samples, derive_seed(cfg.seed, TAG_DATA, 1),
        split="val")
    data.save_dataset(out, spec, {"train": train, "val": val})
    cfg.save(out / "config.json")
    print(f"wrote {len(train.samples)} train / {len(val.samples)} val scenes "
          f"({spec.num_classes} classes, {spec.resolution[0]}x"
          f"{spec.resolution[1]}) to {out}")
    return 0


def _run_training(args, *, kind, csv_path, ckpt_path, fieldnames, train,
                  models, cfg, start_step, grid_fn=None):
    """Shared resume/flush/checkpoint plumbing around one train loop.

    Buffered metric rows hit the CSV before each checkpoint lands, so a
    crash never leaves a checkpoint ahead of its CSV. A zero-step run still
    writes an initialization checkpoint (step ``start_step - 1``) so the
    artifact contract holds. ``grid_fn(step)`` renders a periodic sample
    grid alongside each checkpoint.
    """
    buffer = []

    def flush():
        ckpt.append_metrics_csv(csv_path, buffer, fieldnames)
        buffer.clear()

    def on_checkpoint(step, opts):
        flush()
        ckpt.save_checkpoint(ckpt_path, kind=kind, cfg=cfg, step=step,
                             models=models, optimizers=opts)
        if grid_fn is not None:
            grid_fn(step)

    metrics = train(buffer.append, on_checkpoint)
    flush()
    if not ckpt_path.exists():
        ckpt.save_checkpoint(ckpt_path, kind=kind, cfg=cfg,
                             step=start_step - 1, models=models)
    return metrics


def cmd_train_seg(args) -> int:
    cfg = load_with_overrides(args.config, args.overrides)
    data_dir = Path(args.data)
    dataset = data.load_dataset(data_dir, "train")
    _check_dataset(cfg, data.load_meta(data_dir), data_dir)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "seg.ckpt"
    csv_path = out / "seg_metrics.csv"

    gen, critic = build_seg_models(cfg)
    start_step, opt_state = 0, None
    if args.resume:
        payload = ckpt.load_checkpoint(ckpt_path, kind="seg",
                                       expect_config=cfg)
        gen.load_state_dict(payload["models"]["gen"])
        critic.load_state_dict(payload["models"]["critic"])
        start_step = payload["step"] + 1
        opt_state = payload["optimizers"] or None
        ckpt.truncate_metrics_csv(csv_path, payload["step"])
    else:
        _prepare_restart(ckpt_path, csv_path, args.force)

    metrics = _run_training(
        args, kind="seg", csv_path=csv_path, ckpt_path=ckpt_path,
        fieldnames=SEG_FIELDS, models={"gen": gen, "critic": critic},
        cfg=cfg, start_step=start_step,
        grid_fn=lambda step: _layout_grid(
            gen, cfg, out / f"seg_samples_{step:06d}.png"),
        train=lambda on_metrics, on_ckpt: seggen.train_seg(
            gen, critic, dataset, cfg.seg_schedule(), cfg.gumbel_config(),
            cfg.seg_train_config(), start_step=start_step,
            max_steps=args.max_steps, opt_state=opt_state,
            on_checkpoint=on_ckpt, on_metrics=on_metrics))

    _layout_grid(gen, cfg, out / "seg_samples.png")
    last = metrics[-1]["step"] if metrics else start_step - 1
    print(f"layout generator trained through step {last}; "
          f"checkpoint at {ckpt_path}")
    return 0


def cmd_train_spade(args) -> int:
    cfg = load_with_overrides(args.config, args.overrides)
    data_dir = Path(args.data)
    dataset = data.load_dataset(data_dir, "train")
    _check_dataset(cfg, data.load_meta(data_dir), data_dir)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "spade.ckpt"
    csv_path = out / "spade_metrics.csv"

    gen, disc = build_spade_models(cfg)
    extractor = perc_extractor(cfg)
    start_step, opt_state = 0, None
    if args.resume:
        payload = ckpt.load_checkpoint(ckpt_path, kind="spade",
                                       expect_config=cfg)
        gen.load_state_dict(payload["models"]["gen"])
        disc.load_state_dict(payload["models"]["disc"])
        start_step = payload["step"] + 1
        opt_state = payload["optimizers"] or None
        ckpt.truncate_metrics_csv(csv_path, payload["step"])
    else:
        _prepare_restart(ckpt_path, csv_path, args.force)

    def probe_grid(path):
        with torch.no_grad():
            probe = gen.synthesize(torch.from_numpy(dataset.segmaps()[:16]))
        data.save_image_grid(probe.permute(0, 2, 3, 1).numpy(), path)

    metrics = _run_training(
        args, kind="spade", csv_path=csv_path, ckpt_path=ckpt_path,
        fieldnames=SPADE_FIELDS, models={"gen": gen, "disc": disc},
        cfg=cfg, start_step=start_step,
        grid_fn=lambda step: probe_grid(out / f"spade_samples_{step:06d}.png"),
        train=lambda on_metrics, on_ckpt: imgsynth.train_spade(
            gen, disc, extractor, dataset, cfg.spade_train_config(),
            start_step=start_step, max_steps=args.max_steps,
            opt_state=opt_state, on_checkpoint=on_ckpt,
            on_metrics=on_metrics))

    probe_grid(out / "spade_samples.png")
    last = metrics[-1]["step"] if metrics else start_step - 1
    print(f"image synthesizer trained through step {last}; "
          f"checkpoint at {ckpt_path}")
    return 0


def _load_pretrained(cfg: RunConfig, seg_path, spade_path):
    g_sb, critic_sb = build_seg_models(cfg)
    g_spd, d_spd = build_spade_models(cfg)
    seg_payload = ckpt.load_checkpoint(seg_path, kind="seg", expect_arch=cfg)
    spade_payload = ckpt.load_checkpoint(spade_path, kind="spade",
                                         expect_arch=cfg)
    g_sb.load_state_dict(seg_payload["models"]["gen"])
    critic_sb.load_state_dict(seg_payload["models"]["critic"])
    g_spd.load_state_dict(spade_payload["models"]["gen"])
    d_spd.load_state_dict(spade_payload["models"]["disc"])
    g_sb.set_stage(g_sb.n_stages - 1, 1.0)
    critic_sb.set_stage(critic_sb.n_stages - 1, 1.0)
    return g_sb, critic_sb, g_spd, d_spd


def cmd_finetune(args) -> int:
    cfg = load_with_overrides(args.config, args.overrides)
    data_dir = Path(args.data)
    dataset = data.load_dataset(data_dir, "train")
    _check_dataset(cfg, data.load_meta(data_dir), data_dir)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seg_path = Path(args.seg_checkpoint or out / "seg.ckpt")
    spade_path = Path(args.spade_checkpoint or out / "spade.ckpt")

    if args.ablate:
        return _run_ablation(args, cfg, dataset, data_dir, out, seg_path,
                             spade_path)

    ckpt_path = out / "composite.ckpt"
    csv_path = out / "finetune_metrics.csv"
    if args.from_scratch:
        g_sb, critic_sb = build_seg_models(cfg)
        g_spd, d_spd = build_spade_models(cfg)
        g_sb.set_stage(g_sb.n_stages - 1, 1.0)
        critic_sb.set_stage(critic_sb.n_stages - 1, 1.0)
    else:
        g_sb, critic_sb, g_spd, d_spd = _load_pretrained(cfg, seg_path,
                                                         spade_path)
    d2 = build_d2(cfg)
    extractor = perc_extractor(cfg)

    start_step, opt_state = 0, None
    if args.resume:
        payload = ckpt.load_checkpoint(ckpt_path, kind="composite",
                                       expect_config=cfg)
        for name, model in (("g_sb", g_sb), ("critic_sb", critic_sb),
                            ("g_spd", g_spd), ("d_spd", d_spd), ("d2", d2)):
            model.load_state_dict(payload["models"][name])
        start_step = payload["step"] + 1
        opt_state = payload["optimizers"] or None
        ckpt.truncate_metrics_csv(csv_path, payload["step"])
    else:
        _prepare_restart(ckpt_path, csv_path, args.force)

    def pair_grid(path, seed_step):
        _, images = _sample_pairs(g_sb, g_spd, cfg.gumbel_config(), 16,
                                  derive_seed(cfg.seed, TAG_EVAL, seed_step),
                                  cfg.eval.sample_batch)
        data.save_image_grid(images, path)

    ft_cfg = cfg.finetune_config(ft_sb=not args.freeze_sb,
                                 ft_spade=not args.freeze_spade)
    metrics = _run_training(
        args, kind="composite", csv_path=csv_path, ckpt_path=ckpt_path,
        fieldnames=FT_FIELDS, cfg=cfg, start_step=start_step,
        models={"g_sb": g_sb, "critic_sb": critic_sb, "g_spd": g_spd,
                "d_spd": d_spd, "d2": d2},
        grid_fn=lambda step: pair_grid(
            out / f"composite_samples_{step:06d}.png", 998),
        train=lambda on_metrics, on_ckpt: end2end.finetune(
            g_sb, critic_sb, g_spd, d_spd, d2, extractor, dataset,
            cfg.gumbel_config(), ft_cfg, start_step=start_step,
            max_steps=args.max_steps, opt_state=opt_state,
            on_checkpoint=on_ckpt, on_metrics=on_metrics))

    pair_grid(out / "composite_samples.png", 998)
    last = metrics[-1]["step"] if metrics else start_step - 1
    print(f"composed pipeline fine-tuned through step {last}; "
          f"checkpoint at {ckpt_path}")
    return 0


def _run_ablation(args, cfg, dataset, data_dir, out, seg_path, spade_path) -> int:
    val = data.load_dataset(data_dir, "val")

    def make_models():
        g_sb, critic_sb, g_spd, d_spd = _load_pretrained(cfg, seg_path,
                                                         spade_path)
        return g_sb, critic_sb, g_spd, d_spd, perc_extractor(cfg)

    rows = end2end.run_ablation(
        make_models, lambda: build_d2(cfg), dataset, cfg.gumbel_config(),
        cfg.finetune_config(), build_embedder(cfg),
        n_per_trial=cfg.eval.n_per_trial, trials=cfg.eval.trials,
        eval_seed=derive_seed(cfg.seed, TAG_EVAL),
        layout_samples=cfg.eval.layout_samples, eval_dataset=val)
    csv_path = out / "ablation.csv"
    if csv_path.exists():
        csv_path.unlink()
    ckpt.append_metrics_csv(csv_path, rows, ABLATION_FIELDS)
    for r in rows:
        print(f"{r['setting']:>6}: fid={r['fid']:.4f} "
              f"hist_kl={r['hist_kl']:.4f} steps={r['steps']}")
    print(f"ablation grid written to {csv_path}")
    return 0


def cmd_sample(args) -> int:
    payload = ckpt.load_checkpoint(args.checkpoint, kind="composite")
    cfg = apply_overrides(RunConfig.from_dict(payload["config"]),
                          args.overrides)
    g_sb, _ = build_seg_models(cfg)
    g_spd, _ = build_spade_models(cfg)
    g_sb.load_state_dict(payload["models"]["g_sb"])
    g_spd.load_state_dict(payload["models"]["g_spd"])
    g_sb.set_stage(g_sb.n_stages - 1, 1.0)

    seed = cfg.seed if args.seed is None else args.seed
    labels, images = _sample_pairs(g_sb, g_spd, cfg.gumbel_config(), args.n,
                                   seed, cfg.eval.sample_batch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    colors = cfg.world_spec().class_colors
    from PIL import Image
    for i in range(args.n):
        img8 = np.round(images[i] * 255).astype(np.uint8)
        Image.fromarray(img8).save(out / f"img_{i:04d}.png")
        Image.fromarray(data.render_palette(labels[i], colors)).save(
            out / f"seg_{i:04d}.png")
    data.save_image_grid(images, out / "grid.png")
    print(f"wrote {args.n} samples (image + layout pairs) to {out}")
    return 0


def cmd_eval(args) -> int:
    payload = ckpt.load_checkpoint(args.checkpoint)
    cfg = apply_overrides(RunConfig.from_dict(payload["config"]),
                          args.overrides)
    val = data.load_dataset(args.data, args.split)
    _check_dataset(cfg, data.load_meta(args.data), args.data)
    emb = build_embedder(cfg)
    kind = payload["kind"]
    eval_seed = derive_seed(cfg.seed, TAG_EVAL)

    report = {
        "seed": eval_seed,
        "embedder_id": emb.embedder_id,
        "config_hash": payload["config_hash"],
        "checkpoint": str(args.checkpoint),
        "step": payload["step"],
        "split": args.split,
    }

    if args.gt_conditioning:
        if kind == "composite":
            g_spd, _ = build_spade_models(cfg)
            g_spd.load_state_dict(payload["models"]["g_spd"])
        elif kind == "spade":
            g_spd, _ = build_spade_models(cfg)
            g_spd.load_state_dict(payload["models"]["gen"])
        else:
            raise RuntimeError(
                f"checkpoint kind {kind!r} has no image synthesizer; "
                f"ground-truth conditioning needs 'spade' or 'composite'")
        value = evaluation.eval_conditioned_on_gt(g_spd, val, emb)
        report.update(metric="fid_gt_conditioned", mean=value, trials=1,
                      n_per_trial=len(val.samples))
    elif args.metric == "fid":
        if kind != "composite":
            raise RuntimeError(
                f"checkpoint kind {kind!r} cannot drive unconditional "
                f"sampling; 'fid' needs a composite checkpoint")
        g_sb, _ = build_seg_models(cfg)
        g_spd, _ = build_spade_models(cfg)
        g_sb.load_state_dict(payload["models"]["g_sb"])
        g_spd.load_state_dict(payload["models"]["g_spd"])
        g_sb.set_stage(g_sb.n_stages - 1, 1.0)
        sampler = end2end.compose_sampler(g_sb, g_spd, cfg.gumbel_config(),
                                          cfg.eval.sample_batch)
        mean, scores = evaluation.evaluate_fid(
            sampler, val.images(), emb, n_per_trial=cfg.eval.n_per_trial,
            trials=cfg.eval.trials, seed=eval_seed)
        report.update(metric="fid", mean=mean, scores=scores,
                      trials=cfg.eval.trials,
                      n_per_trial=cfg.eval.n_per_trial)
    elif args.metric == "layout":
        if kind == "composite":
            g_sb, _ = build_seg_models(cfg)
            g_sb.load_state_dict(payload["models"]["g_sb"])
        elif kind == "seg":
            g_sb, _ = build_seg_models(cfg)
            g_sb.load_state_dict(payload["models"]["gen"])
        else:
            raise RuntimeError(
                f"checkpoint kind {kind!r} has no layout generator")
        g_sb.set_stage(g_sb.n_stages - 1, 1.0)
        maps = end2end.sample_layouts(g_sb, cfg.gumbel_config(),
                                      cfg.eval.layout_samples, eval_seed)
        kl, stats = evaluation.layout_divergence(maps, val.segmaps(),
                                                 cfg.world.num_classes)
        report.update(metric="layout_kl", mean=kl,
                      n_per_trial=cfg.eval.layout_samples, trials=1,
                      area_stats={k: v.tolist() for k, v in stats.items()})
    else:
        raise ValueError(f"unknown metric {args.metric!r}")

    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text + "\n")
        print(f"{report['metric']}: mean={report['mean']:.4f} "
              f"(report at {args.report})")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sbgan",
        description="Two-stage layout-then-image generative pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. seg.lr=5e-4")
        p.add_argument("--workdir", default=None,
                       help="resolve relative paths against this directory")

    p = sub.add_parser("make-toy-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_toy_data)

    def training(p):
        common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--resume", action="store_true")
        p.add_argument("--force", action="store_true")
        p.add_argument("--max-steps", type=int, default=None)

    p = sub.add_parser("train-seg", help="pretrain the layout generator")
    training(p)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-spade", help="pretrain the image synthesizer")
    training(p)
    p.set_defaults(func=cmd_train_spade)

    p = sub.add_parser("finetune", help="fine-tune the composed pipeline")
    training(p)
    p.add_argument("--seg-checkpoint", default=None)
    p.add_argument("--spade-checkpoint", default=None)
    p.add_argument("--freeze-sb", action="store_true")
    p.add_argument("--freeze-spade", action="store_true")
    p.add_argument("--from-scratch", action="store_true",
                   help="skip the pretrained stage checkpoints")
    p.add_argument("--ablate", action="store_true",
                   help="run the four-way freeze grid instead of one run "
                        "(requires the pretrained checkpoints)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="draw images from a composite checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--metric", choices=("fid", "layout"), default="fid")
    p.add_argument("--gt-conditioning", action="store_true",
                   help="score images rendered from ground-truth layouts")
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if os.environ.get("SBGAN_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    cwd = os.getcwd()
    try:
        if getattr(args, "workdir", None):
            os.chdir(args.workdir)
        return args.func(args)
    except FileNotFoundError as e:
        return _fail("missing", e)
    except FileExistsError as e:
        return _fail("exists", e)
    except ValueError as e:
        return _fail("invalid", e)
    except FloatingPointError as e:
        return _fail("numeric", e)
    except RuntimeError as e:
        return _fail("state", e)
    finally:
        os.chdir(cwd)


def _fail(code: str, err: Exception) -> int:
    print(f"ERROR:{code}: {err}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
