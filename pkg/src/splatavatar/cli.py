"""Command-line entry point: ``splatavatar <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .diffusion import VOCABULARY, SamplingError
from .losses import psnr, ssim
from .pipeline.config import ConfigError, RunConfig, load_config
from .pipeline.io import FormatError, read_png, tracked_outputs, write_png

log = logging.getLogger("splatavatar")

EXIT_ERROR = 1
PROMPT_FLAGS = {slot: "--prompt-" + slot.replace("_", "-") for slot in VOCABULARY}


class CommandError(RuntimeError):
    pass


# --------------------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    return load_config(args.config, seed=args.seed)


def _load_samples(path):
    from .pipeline.data import load_dataset

    samples = load_dataset(path)
    if not samples:
        raise CommandError(f"{path}: dataset is empty")
    return samples


def _parse_indices(text: str | None, n: int) -> list[int]:
    if text is None:
        return list(range(n))
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    bad = [i for i in out if not 0 <= i < n]
    if bad:
        raise CommandError(f"sample indices {bad} out of range for a dataset of {n}")
    return out


def _write_views(out_dir: Path, images, tracker, prefix: str = "") -> list[Path]:
    from .pipeline.report import VIEW_LABELS

    paths = []
    for name, img in zip(VIEW_LABELS, images):
        p = tracker.add(out_dir / f"{prefix}{name}.png")
        write_png(p, np.asarray(img))
        paths.append(p)
    return paths


def _save_param_file(path, params, anchors, body, meta, tracker):
    from .pipeline.checkpoint import save_params

    # geometry is stored so the file renders without rebuilding the body
    save_params(
        tracker.add(path),
        params,
        meta,
        anchors=np.asarray(anchors, dtype=np.float32),
        rotation=np.asarray(body.rotations, dtype=np.float32),
        region=np.asarray(body.regions, dtype=np.int64),
    )


def _render_param_file(path, cfg: RunConfig):
    from .gaussians import GaussianSet
    from .pipeline.checkpoint import load_params
    from .pipeline.data import cameras
    from .rasterizer import render_views

    params, arrays, meta = load_params(path)
    for key in ("anchors", "rotation", "region"):
        if key not in arrays:
            raise FormatError(f"{path}: parameter file has no {key!r} array")
    if params.ndim != 2:
        raise CommandError(f"{path}: holds {params.shape[0]} parameter sets; render takes a single set")
    g = GaussianSet.from_params(torch.from_numpy(params), arrays["anchors"], arrays["rotation"], arrays["region"])
    with torch.no_grad():
        imgs = render_views(g, cameras(cfg), (cfg.background,) * 3)
    return np.stack([im.rgb.numpy() for im in imgs]), meta


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args, tracker) -> None:
    from .pipeline.data import body_for, generate_dataset, save_dataset

    cfg = _config(args)
    size = cfg.dataset_size if args.size is None else args.size
    body = body_for(cfg)
    samples = generate_dataset(cfg, body, size, lambda i: log.info("sample %d/%d", i + 1, size))
    save_dataset(tracker.add(args.out), samples, cfg)
    print(f"wrote {len(samples)} samples ({cfg.n_points} points, {cfg.image_size}px) to {args.out}")


def cmd_fit(args, tracker) -> None:
    from .pipeline.data import body_for, cameras, ranges_from_config
    from .pipeline.fitting import fit_gaussians, view_psnrs

    cfg = _config(args)
    samples = _load_samples(args.data)
    idx = _parse_indices(args.index, len(samples))
    body = body_for(cfg, samples[0].gt_params.shape[0])
    cams = cameras(cfg)
    iters = cfg.fit_iters if args.iters is None else args.iters
    results, anchors = [], []
    for i in idx:
        s = samples[i]
        torch.manual_seed(cfg.seed)
        res = fit_gaussians(s.images, cams, body, ranges_from_config(cfg), iters, cfg.fit_lr, cfg.w_l1, cfg.w_ssim, s.beta, cfg.background)
        scores = view_psnrs(res.gaussians, cams, s.images, cfg.background)
        print(f"sample {i}\t" + "\t".join(f"{v:.3f}" for v in scores))
        results.append(res.params())
        anchors.append(body.posed(s.beta))
    params = np.stack(results) if len(results) > 1 else results[0]
    anchors = np.stack(anchors) if len(anchors) > 1 else anchors[0]
    meta = {"source": "fit", "indices": idx, "iters": iters, "attributes": [samples[i].attributes for i in idx]}
    _save_param_file(Path(args.out), params, anchors, body, meta, tracker)


def _train_recon(args, tracker, twin_mode: bool) -> None:
    from .pipeline.checkpoint import load_reconstruction, save_reconstruction
    from .pipeline.data import body_for
    from .pipeline.training import train_text_twin, train_uplift

    cfg = _config(args)
    samples = _load_samples(args.data)
    n = samples[0].gt_params.shape[0]
    if n != cfg.n_points:
        cfg = cfg.replace(n_points=n)
    body = body_for(cfg)

    def progress(step, loss):
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, loss)

    if twin_mode:
        net, hist = train_text_twin(samples, cfg, body, args.steps, progress)
    else:
        twin = None
        if cfg.twin_regularization:
            if args.twin is None:
                raise ConfigError("twin_regularization is on; pass --twin <checkpoint> or set it to false")
            twin = load_reconstruction(args.twin, body)
        net, hist = train_uplift(samples, cfg, body, twin, args.steps, progress)
    save_reconstruction(tracker.add(args.out), net, hist.losses)
    print(f"final loss {hist.losses[-1]:.6f} after {len(hist.losses)} steps; wrote {args.out}")


def cmd_train_uplift(args, tracker) -> None:
    _train_recon(args, tracker, twin_mode=False)


def cmd_train_twin(args, tracker) -> None:
    _train_recon(args, tracker, twin_mode=True)


def cmd_train_diffusion(args, tracker) -> None:
    from .pipeline.checkpoint import save_diffusion
    from .pipeline.data import body_for, subset_body
    from .pipeline.training import train_diffusion

    cfg = _config(args)
    samples = _load_samples(args.data)
    n = samples[0].gt_params.shape[0]
    body, rows = subset_body(body_for(cfg, n), min(cfg.diffusion_points, n), cfg.body_seed)
    corpus = np.stack([s.gt_params[rows] for s in samples])
    conds = torch.stack([s.condition.encoding for s in samples])

    def progress(step, loss):
        if step % 100 == 0:
            log.info("step %d loss %.5f", step, loss)

    model = train_diffusion(corpus, conds, body.anchors, cfg.replace(n_points=n), args.steps, progress)
    save_diffusion(tracker.add(args.out), model, cfg.replace(n_points=n))
    print(f"final loss {model.history[-1]:.6f} after {len(model.history)} steps; wrote {args.out}")


def _attributes(args) -> dict:
    attrs = {}
    for slot, values in VOCABULARY.items():
        value = getattr(args, "prompt_" + slot)
        if value is None:
            raise CommandError(f"missing {PROMPT_FLAGS[slot]} (one of: {', '.join(values)})")
        attrs[slot] = value
    return attrs


def _diffusion_body(model, cfg):
    from .pipeline.data import body_for, subset_body

    body, _ = subset_body(body_for(cfg), len(model.points), cfg.body_seed)
    if not np.allclose(body.anchors, model.points):
        raise FormatError("checkpoint anchors do not match the rebuilt body; was the mannequin changed?")
    return body


def cmd_sample(args, tracker) -> None:
    from .pipeline.checkpoint import load_diffusion
    from .pipeline.data import cameras, render_params
    from .pipeline.sampling import sample_params, top_color

    model, cfg = load_diffusion(args.checkpoint)
    if args.config is not None:
        # the checkpoint fixes the model; a config file may change how samples are rendered
        user = load_config(args.config)
        cfg = cfg.replace(image_size=user.image_size, background=user.background)
    attrs = _attributes(args)
    w = cfg.guidance if args.guidance is None else args.guidance
    seed = 0 if args.seed is None else args.seed
    body = _diffusion_body(model, cfg)
    params = sample_params(model, body, cfg, attrs, w, seed)
    out = Path(args.out)
    images = render_params(body, params, cameras(cfg), None, cfg.background)
    meta = {"source": "sample", "attributes": attrs, "guidance": w, "seed": seed}
    _save_param_file(out / "params.splt", params, body.anchors, body, meta, tracker)
    _write_views(out, images, tracker)
    print(f"top colour {top_color(params, body)} (prompted {attrs['top_color']}); wrote {out}")


def cmd_render(args, tracker) -> None:
    cfg = _config(args)
    images, meta = _render_param_file(args.params, cfg)
    _write_views(Path(args.out), images, tracker)
    print(f"rendered {len(images)} views to {args.out}")


def _image_pairs(pred: Path, target: Path) -> list[tuple[str, Path, Path]]:
    if pred.is_dir() != target.is_dir():
        raise CommandError("--pred and --target must both be files or both be directories")
    if not pred.is_dir():
        return [(pred.name, pred, target)]
    names = sorted(p.name for p in pred.glob("*.png"))
    if not names:
        raise CommandError(f"{pred}: no PNG files")
    missing = [n for n in names if not (target / n).is_file()]
    if missing:
        raise CommandError(f"{target}: missing {', '.join(missing)}")
    return [(n, pred / n, target / n) for n in names]


def cmd_eval(args, tracker) -> None:
    from .pipeline import report

    cfg = _config(args)
    out = Path(args.out)
    rows: list[tuple] = []
    modes = [args.pred is not None, args.checkpoint is not None, args.diffusion is not None]
    if not any(modes):
        raise CommandError("eval needs --pred/--target, --checkpoint/--data or --diffusion")

    if args.pred is not None:
        if args.target is None:
            raise CommandError("--pred needs --target")
        values = []
        for name, p, t in _image_pairs(Path(args.pred), Path(args.target)):
            a = torch.from_numpy(read_png(p))
            b = torch.from_numpy(read_png(t))
            score, sim = psnr(a, b), float(ssim(a, b))
            rows += [("images", name, "psnr", score), ("images", name, "ssim", sim)]
            values.append(score)
        report.psnr_figure(tracker.add(out / "images_psnr.png"), np.array([values]), "PSNR per image pair")

    if args.checkpoint is not None:
        from .pipeline.checkpoint import load_reconstruction
        from .pipeline.data import cameras
        from .pipeline.training import predict

        if args.data is None:
            raise CommandError("--checkpoint needs --data")
        net = load_reconstruction(args.checkpoint)
        samples = _load_samples(args.data)
        idx = _parse_indices(args.index, len(samples))
        chosen = [samples[i] for i in idx]
        params, anchors, _ = predict(net, chosen)
        with torch.no_grad():
            rgb = net.render(params, anchors, cameras(net.cfg), background=net.cfg.background).numpy()
        table = np.zeros((len(chosen), 4))
        for r, (i, s) in enumerate(zip(idx, chosen)):
            for v, label in enumerate(report.VIEW_LABELS):
                a, b = torch.from_numpy(rgb[r, v]), torch.from_numpy(s.images[v])
                table[r, v] = psnr(a, b)
                rows += [("model", f"{i}/{label}", "psnr", table[r, v]), ("model", f"{i}/{label}", "ssim", float(ssim(a, b)))]
        for v, label in enumerate(report.VIEW_LABELS):
            rows.append(("model", f"mean/{label}", "psnr", float(np.mean(table[:, v]))))
        report.psnr_figure(tracker.add(out / "model_psnr.png"), table)
        report.comparison_figure(tracker.add(out / "model_views.png"), rgb[0], chosen[0].images)

    if args.diffusion is not None:
        from .pipeline.checkpoint import load_diffusion
        from .pipeline.sampling import alignment_prompts, alignment_study

        model, dcfg = load_diffusion(args.diffusion)
        body = _diffusion_body(model, dcfg)
        prompts = alignment_prompts(args.n_samples, cfg.seed)
        guidances = [dcfg.guidance if args.guidance is None else args.guidance, 0.0]
        rates = {}
        for w in dict.fromkeys(guidances):
            rate = alignment_study(model, body, dcfg, prompts, w, cfg.seed)
            rates[f"w={w:g}"] = rate
            rows.append(("alignment", f"w={w:g}", "top_color_rate", rate))
        report.alignment_figure(tracker.add(out / "alignment.png"), rates)
        report.loss_figure(tracker.add(out / "diffusion_loss.png"), model.history, "denoiser training loss")

    report.write_tsv(tracker.add(out / "report.tsv"), rows)
    sys.stdout.write(report.tsv_text(rows))


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value lines)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="splatavatar", description="Text-to-Gaussian-avatar pipeline on a procedural mannequin.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="render a procedural dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, help="number of samples (default: dataset_size)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit", parents=[common], help="fit Gaussian parameters to dataset renders")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="parameter file to write")
    p.add_argument("--index", help="sample indices, e.g. 0,3,5-7 (default: all)")
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_fit)

    for name, func, help_text in (
        ("train-uplift", cmd_train_uplift, "train the image-conditioned reconstruction model"),
        ("train-twin", cmd_train_twin, "train the text-conditioned twin"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int)
        if name == "train-uplift":
            p.add_argument("--twin", help="twin checkpoint for multi-view regularization")
        p.set_defaults(func=func)

    p = sub.add_parser("train-diffusion", parents=[common], help="train the parameter denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("sample", parents=[common], help="sample an avatar from a text prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--guidance", type=float)
    for slot, values in VOCABULARY.items():
        p.add_argument(PROMPT_FLAGS[slot], dest="prompt_" + slot, choices=values, metavar="{" + "|".join(values) + "}")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("render", parents=[common], help="render a parameter file from the four canonical views")
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM and attribute-alignment report")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--pred", help="predicted PNG file or directory")
    p.add_argument("--target", help="target PNG file or directory")
    p.add_argument("--checkpoint", help="reconstruction checkpoint to score on --data")
    p.add_argument("--data")
    p.add_argument("--index", help="sample indices for --checkpoint (default: all)")
    p.add_argument("--diffusion", help="diffusion checkpoint for the alignment score")
    p.add_argument("--n-samples", type=int, default=20)
    p.add_argument("--guidance", type=float)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with tracked_outputs() as tracker:
            args.func(args, tracker)
    except (CommandError, ConfigError, FormatError, SamplingError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"splatavatar {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
