"""Pipeline stages behind the CLI: each one reads upstream artifacts from the
run directory, does its work, and writes checkpoints, metric logs (JSON
lines), and CSV curves back into it.

Metric logs carry no wall-clock values, so a rerun of the same manifest
produces byte-identical files; timing measurements go to separate CSV files.
"""
import csv
import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

import fewstep.engine as E
from .checkpoint import CheckpointError, load_params, save_params
from .codec import LatentCodec, identity_codec, pretrain_codec
from .data import NUM_CLASSES, SPRITE_DIM, make_dataset
from .diffusion import (DenoiserModel, fit_denoiser, loss_conjugate_v,
                        loss_standard_v)
from .distill import DistillState, distill_loop, student_sample
from .manifest import config_hash, resolve_manifest, save_manifest, stage_rng
from .metrics import timing_report, vendi_score, wasserstein2
from .nn import Module
from .optim import AdamW
from .reward import (LatentRewardModel, RewardHooks, finetune_compare,
                     make_reward)
from .schedule import ddim_grid, make_schedule


class PipelineError(RuntimeError):
    pass


_FIT_LOSSES = {"conjugate-v": loss_conjugate_v, "standard-v": loss_standard_v}


# ------------------------------------------------------------ plumbing

def build_schedule(man):
    if man.schedule.kind == "vp-cosine":
        return make_schedule("vp-cosine", man.schedule.T, s=man.schedule.s,
                             alpha_floor=man.schedule.alpha_floor)
    return make_schedule(man.schedule.kind, man.schedule.T)


def build_dataset(man):
    return make_dataset(man.domain, man.seed, man.dataset_size)


def _need(path, stage):
    if not os.path.exists(path):
        raise PipelineError(
            f"missing artifact {os.path.basename(path)!r}; "
            f"run the {stage} stage first")
    return path


def _load_state_dict(module, state, path):
    params = dict(module.named_parameters())
    if set(params) != set(state):
        raise CheckpointError(f"parameter names in {path} do not match the model")
    for name, p in params.items():
        if tuple(p.data.shape) != tuple(state[name].shape):
            raise CheckpointError(f"shape mismatch for {name} in {path}")
        p.data[...] = state[name]


def save_model(path, model, extra=None):
    meta = {"ctor": model._ctor}
    meta.update(extra or {})
    save_params(path, list(model.named_parameters()), meta=meta)


def load_model(path):
    state, meta = load_params(path)
    ctor = dict(meta["ctor"])
    if ctor.get("latent_shape"):
        ctor["latent_shape"] = tuple(ctor["latent_shape"])
    model = DenoiserModel(rng=np.random.default_rng(0), **ctor)
    _load_state_dict(model, state, path)
    return model


def save_codec(path, codec):
    named = ([("encoder." + n, p) for n, p in codec.encoder.named_parameters()]
             + [("decoder." + n, p) for n, p in codec.decoder.named_parameters()])
    meta = {
        "kind": codec.kind,
        "latent_dim": codec.latent_dim,
        "pixel_dim": codec.pixel_dim,
        "latent_mean": np.asarray(codec.latent_mean).tolist(),
        "latent_std": np.asarray(codec.latent_std).tolist(),
        "recon_mse": codec.recon_mse,
        "usable": codec.usable,
        "enc_dims": _mlp_dims(codec.encoder),
        "dec_dims": _mlp_dims(codec.decoder),
    }
    save_params(path, named, meta=meta)


def _mlp_dims(mlp):
    shapes = [l.w.data.shape for l in mlp.layers]
    return [int(shapes[0][0])] + [int(s[1]) for s in shapes]


def load_codec(path):
    from . import nn

    state, meta = load_params(path)
    rng = np.random.default_rng(0)
    enc = nn.MLP(meta["enc_dims"], rng)
    dec = nn.MLP(meta["dec_dims"], rng)
    _load_state_dict(enc, {k[len("encoder."):]: v for k, v in state.items()
                           if k.startswith("encoder.")}, path)
    _load_state_dict(dec, {k[len("decoder."):]: v for k, v in state.items()
                           if k.startswith("decoder.")}, path)
    codec = LatentCodec(meta["kind"], meta["latent_dim"], enc, dec,
                        pixel_dim=meta["pixel_dim"],
                        latent_mean=np.asarray(meta["latent_mean"]),
                        latent_std=np.asarray(meta["latent_std"]))
    codec.freeze(meta["recon_mse"])
    codec.usable = meta["usable"]
    return codec


def _codec_for(man, out):
    if man.domain == "gauss2d":
        return identity_codec(2)
    if man.latent.kind == "identity":
        return identity_codec(SPRITE_DIM)
    codec = load_codec(_need(os.path.join(out, "codec.json"), "train-codec"))
    if not codec.usable:
        raise PipelineError("stored codec missed its reconstruction budget; "
                            "rerun train-codec with a larger budget")
    return codec


def _dataset_with_latents(man, out):
    ds = build_dataset(man)
    codec = _codec_for(man, out)
    if man.domain == "sprites8":
        ds.attach_latents(codec.encode(ds.pixels))
    return ds, codec


def _load_teacher(out):
    return load_model(_need(os.path.join(out, "teacher.json"), "train-teacher"))


def _metric_row(chash, metric, value, std=None, it=None, **extra):
    row = {"metric": metric, "value": float(value),
           "std": None if std is None else float(std),
           "config_hash": chash, "iter": it}
    row.update(extra)
    return row


def _write_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _balanced_classes(n):
    return np.repeat(np.arange(NUM_CLASSES), n // NUM_CLASSES)


def _emit_samples(folder, man, latents, labels, codec):
    pixels = codec.decode(latents)
    if man.domain == "gauss2d":
        rows = [(float(x), float(y), int(k))
                for (x, y), k in zip(pixels, labels)]
        _write_csv(os.path.join(folder, "samples.csv"), ["x", "y", "class"], rows)
    else:
        np.savez(os.path.join(folder, "samples.npz"),
                 pixels=pixels, labels=labels)
        with open(os.path.join(folder, "samples.meta.json"), "w") as fh:
            json.dump({"image_shape": [8, 8], "count": int(len(labels)),
                       "domain": man.domain}, fh, indent=2)


def _reference_pixels(ds, n):
    src = ds.latents if ds.kind == "gauss2d" else ds.pixels
    return np.asarray(src[:n], dtype=np.float64)


# -------------------------------------------------------------- stages

def run_train_teacher(man, out, threads=1):
    sched = build_schedule(man)
    ds, _codec = _dataset_with_latents(man, out)
    rng = stage_rng(man, "teacher")
    model = DenoiserModel(man.latent.latent_dim, NUM_CLASSES + 1, rng,
                          param_kind=man.model.param_kind,
                          hidden=man.model.hidden, depth=man.model.depth,
                          time_dim=man.model.time_dim,
                          class_dim=man.model.class_dim)
    losses = fit_denoiser(model, ds.sample, sched, man.budgets.teacher_iters,
                          rng, loss_fn=_FIT_LOSSES[man.model.param_kind])
    save_model(os.path.join(out, "teacher.json"), model,
               extra={"stage": "train-teacher"})
    _write_csv(os.path.join(out, "teacher_curve.csv"), ["iter", "loss"],
               list(enumerate(losses)))
    return {"final_loss": float(np.mean(losses[-100:]))}


def run_train_codec(man, out, threads=1):
    from .manifest import ManifestError

    if man.latent.kind != "trained-ae":
        raise ManifestError("latent.kind is identity; there is no codec to train")
    ds = build_dataset(man)
    rng = stage_rng(man, "codec")
    codec, losses = pretrain_codec(
        ds, rng, latent_dim=man.latent.latent_dim,
        hidden_enc=tuple(man.latent.hidden_enc),
        hidden_dec=tuple(man.latent.hidden_dec),
        iters=man.budgets.codec_iters, mse_budget=man.latent.mse_budget)
    save_codec(os.path.join(out, "codec.json"), codec)
    _write_csv(os.path.join(out, "codec_curve.csv"), ["iter", "loss"],
               list(enumerate(losses)))
    if not codec.usable:
        raise PipelineError(
            f"codec reconstruction {codec.recon_mse:.4f} missed the "
            f"{man.latent.mse_budget} budget; increase budgets.codec_iters")
    return {"recon_mse": codec.recon_mse}


def _make_distill_state(man, teacher, sched, rng, **overrides):
    kw = dict(
        beta_cd=man.distill.beta_cd, beta_ft=man.distill.beta_ft,
        w_cd=man.distill.w_cd, w_vsd=man.distill.w_vsd,
        fake_ratio=man.distill.fake_ratio, m=man.distill.m,
        student_lr=man.distill.student_lr, fake_lr=man.distill.fake_lr,
        grad_mode=man.distill.grad_mode, target_ema=man.distill.target_ema,
        cd_distance=man.distill.cd_distance, cd_delta=man.distill.cd_delta,
        batch=man.distill.batch)
    kw.update(overrides)
    steps = kw.pop("student_steps", man.student_steps)
    return DistillState(teacher, sched, ddim_grid(sched, steps),
                        ddim_grid(sched, man.cd_steps), rng, **kw)


def _make_hooks(man, ds, codec, rng):
    pixel = make_reward(man.reward.name, dataset=ds)
    conditional = pixel.conditional
    latent_shape = None
    if man.domain == "sprites8" and man.latent.kind == "identity":
        latent_shape = (1, 8, 8)
    lrm = None
    if man.reward.mode == "lrm":
        lrm = LatentRewardModel(man.latent.latent_dim, rng,
                                latent_shape=latent_shape,
                                conditional=conditional,
                                num_classes=NUM_CLASSES + 1)
    return RewardHooks(pixel, codec, lrm=lrm, mode=man.reward.mode,
                       lrm_lr=man.reward.lrm_lr, accum=man.reward.accum,
                       n_trunc=man.reward.n_trunc,
                       group_size=man.reward.group_size or None)


def run_distill(man, out, threads=1):
    sched = build_schedule(man)
    ds, codec = _dataset_with_latents(man, out)
    teacher = _load_teacher(out)
    rng = stage_rng(man, "distill")
    state = _make_distill_state(man, teacher, sched, rng)
    hooks = _make_hooks(man, ds, codec, rng) if man.distill.beta_ft > 0 else None
    log = distill_loop(state, ds, man.budgets.distill_iters, rng,
                       reward_hooks=hooks,
                       snapshot_every=man.distill.snapshot_every)

    folder = os.path.join(out, "distill")
    os.makedirs(folder, exist_ok=True)
    save_model(os.path.join(folder, "student.json"), state.student,
               extra={"stage": "distill"})
    save_model(os.path.join(folder, "fake.json"), state.fake,
               extra={"stage": "distill"})
    if hooks is not None and isinstance(hooks.lrm, Module):
        save_params(os.path.join(folder, "lrm.json"),
                    list(hooks.lrm.named_parameters()),
                    meta={"stage": "distill", "ctor": hooks.lrm._ctor})
    _write_csv(os.path.join(folder, "curves.csv"),
               ["iter", "vsd", "cd", "fake", "lrm", "ft"],
               list(zip(log["iter"], log["vsd"], log["cd"], log["fake"],
                        log["lrm"], log["ft"])))

    n = man.budgets.eval_samples
    labels = _balanced_classes(n)
    eval_rng = stage_rng(man, "eval")
    with E.no_grad():
        gen = student_sample(state.student, labels, state.student_grid,
                             sched, eval_rng, grad_mode="none").data
    _emit_samples(folder, man, gen, labels, codec)

    chash = config_hash(man)
    tail = max(1, min(50, len(log["iter"])))
    rows = [
        _metric_row(chash, f"loss_{k}_final", np.mean(log[k][-tail:]),
                    it=man.budgets.distill_iters)
        for k in ("vsd", "cd", "fake", "lrm", "ft")
    ]
    rows.append(_metric_row(chash, "halted",
                            -1.0 if log["halted"] is None else log["halted"]))
    _write_jsonl(os.path.join(folder, "metrics.jsonl"), rows)
    return {"halted": log["halted"], "counts": log["counts"]}


def run_finetune(man, out, threads=1):
    sched = build_schedule(man)
    ds, codec = _dataset_with_latents(man, out)
    teacher = _load_teacher(out)
    pixel = make_reward(man.reward.name, dataset=ds)
    conditional = pixel.conditional
    latent_shape = None
    if man.domain == "sprites8" and man.latent.kind == "identity":
        latent_shape = (1, 8, 8)

    seed = int(stage_rng(man, "finetune").integers(2**31))

    def make_state():
        return _make_distill_state(
            man, teacher, sched, np.random.default_rng(seed),
            beta_cd=0.0, beta_ft=man.distill.beta_ft)

    def lrm_factory():
        return LatentRewardModel(man.latent.latent_dim,
                                 np.random.default_rng(seed + 1),
                                 latent_shape=latent_shape,
                                 conditional=conditional,
                                 num_classes=NUM_CLASSES + 1)

    report = finetune_compare(
        make_state, lrm_factory, pixel, codec, ds,
        man.budgets.finetune_iters, seed,
        eval_every=man.budgets.finetune_eval_every,
        accum=man.reward.accum, n_trunc=man.reward.n_trunc,
        eval_n=min(512, man.budgets.eval_samples),
        lrm_lr=man.reward.lrm_lr)

    folder = os.path.join(out, "finetune")
    os.makedirs(folder, exist_ok=True)
    chash = config_hash(man)
    rows = []
    timing = []
    for mode, res in report.items():
        _write_csv(os.path.join(folder, f"finetune_{mode}.csv"),
                   ["iter", "reward_pred", "reward_true", "w2"],
                   res["curve"])
        rows.append(_metric_row(chash, f"final_reward_{mode}",
                                res["final_reward"],
                                it=man.budgets.finetune_iters))
        rows.append(_metric_row(chash, f"final_w2_{mode}", res["final_w2"],
                                it=man.budgets.finetune_iters))
        timing.append((mode, res["wall_time"]))
    _write_jsonl(os.path.join(folder, "metrics.jsonl"), rows)
    _write_csv(os.path.join(folder, "wall_time.csv"),
               ["mode", "seconds"], timing)
    return {m: r["final_reward"] for m, r in report.items()}


def _quality_rows(man, chash, gen_pixels, ref_pixels, labels, variant=None):
    extra = {} if variant is None else {"variant": variant}
    per_class = [gen_pixels[labels == k] for k in range(NUM_CLASSES)]
    sizes = {len(g) for g in per_class}
    rows = [
        _metric_row(chash, "vendi", vendi_score(gen_pixels), **extra),
        _metric_row(chash, "w2_to_data",
                    wasserstein2(gen_pixels, ref_pixels), **extra),
    ]
    if len(sizes) == 1:
        from .metrics import diversity
        rows.append(_metric_row(chash, "diversity_per_class",
                                diversity(per_class), **extra))
    return rows


def run_eval(man, out, threads=1):
    sched = build_schedule(man)
    ds, codec = _dataset_with_latents(man, out)
    teacher = _load_teacher(out)
    student = load_model(_need(os.path.join(out, "distill", "student.json"),
                               "distill"))
    grid = ddim_grid(sched, man.student_steps)
    n = man.budgets.eval_samples
    labels = _balanced_classes(n)
    rng = stage_rng(man, "eval")
    with E.no_grad():
        gen = student_sample(student, labels, grid, sched, rng,
                             grad_mode="none").data
    gen_pixels = codec.decode(gen)
    ref_pixels = _reference_pixels(ds, n)

    from .diffusion import ddim_sample
    teacher_grid = ddim_grid(sched, man.cd_steps)
    teacher_lat = ddim_sample(teacher, labels, teacher_grid, sched, rng,
                              w=man.distill.w_cd)
    teacher_pixels = codec.decode(teacher_lat)

    pixel = make_reward(man.reward.name, dataset=ds)
    c_arg = labels if pixel.conditional else None
    reward_gen = pixel.evaluate(gen_pixels, c_arg)
    reward_data = pixel.evaluate(
        ref_pixels, ds.labels[:n] if pixel.conditional else None)

    chash = config_hash(man)
    rows = _quality_rows(man, chash, gen_pixels, ref_pixels, labels)
    rows += [
        _metric_row(chash, "vendi_teacher", vendi_score(teacher_pixels)),
        _metric_row(chash, "w2_teacher",
                    wasserstein2(teacher_pixels, ref_pixels)),
        _metric_row(chash, "reward_student", reward_gen.mean(),
                    std=reward_gen.std()),
        _metric_row(chash, "reward_data", reward_data.mean(),
                    std=reward_data.std()),
    ]
    folder = os.path.join(out, "eval")
    os.makedirs(folder, exist_ok=True)
    _write_jsonl(os.path.join(folder, "metrics.jsonl"), rows)

    step_counts = sorted({1, 2, 4, man.student_steps, man.cd_steps})
    grids = [ddim_grid(sched, k) for k in step_counts]
    timing = timing_report(student, grids, sched, rng, labels,
                           codec=None if man.domain == "gauss2d" else codec)
    _write_csv(
        os.path.join(folder, "timing.csv"),
        ["steps", "diffusion_mean", "diffusion_std", "end_to_end_mean",
         "end_to_end_std", "diffusion_ratio", "end_to_end_ratio"],
        [[timing[k][f] for f in ("steps", "diffusion_mean", "diffusion_std",
                                 "end_to_end_mean", "end_to_end_std",
                                 "diffusion_ratio", "end_to_end_ratio")]
         for k in sorted(timing)])
    return {"rows": len(rows)}


# -------------------------------------------------------------- ablate

def _ablate_variants(man):
    variants = [("steps", s) for s in man.ablate.steps]
    variants += [("m", m) for m in man.ablate.m_values]
    variants += [("head", h) for h in man.ablate.heads]
    return variants


def _run_ablate_variant(man, axis, value, out, idx):
    name = f"{axis}-{value}"
    folder = os.path.join(out, "ablate", name)
    os.makedirs(folder, exist_ok=True)
    sched = build_schedule(man)
    ds, codec = _dataset_with_latents(man, out)
    teacher = _load_teacher(out)
    rng = stage_rng(man, "ablate", child=idx)

    overrides = {"beta_ft": 0.0}
    if axis == "steps":
        overrides["student_steps"] = value
    elif axis == "m":
        overrides["m"] = value
    else:
        overrides["student_kind"] = value
    state = _make_distill_state(man, teacher, sched, rng, **overrides)
    log = distill_loop(state, ds, man.ablate.iters, rng)

    n = min(man.budgets.eval_samples, 512)
    labels = _balanced_classes(n)
    with E.no_grad():
        gen = student_sample(state.student, labels, state.student_grid,
                             sched, rng, grad_mode="none").data
    gen_pixels = codec.decode(gen)
    ref_pixels = _reference_pixels(ds, n)

    chash = config_hash(man)
    rows = _quality_rows(man, chash, gen_pixels, ref_pixels, labels,
                         variant=name)
    tail = max(1, min(50, len(log["iter"])))
    rows.append(_metric_row(chash, "loss_vsd_final",
                            np.mean(log["vsd"][-tail:]), variant=name))
    _write_jsonl(os.path.join(folder, "metrics.jsonl"), rows)
    _write_csv(os.path.join(folder, "curves.csv"),
               ["iter", "vsd", "cd", "fake", "lrm", "ft"],
               list(zip(log["iter"], log["vsd"], log["cd"], log["fake"],
                        log["lrm"], log["ft"])))
    return name


def _ablate_worker(args):
    man_dict, axis, value, out, idx = args
    man = resolve_manifest(man_dict)
    return _run_ablate_variant(man, axis, value, out, idx)


def run_ablate(man, out, threads=1):
    _load_teacher(out)  # fail before spawning children if the input is missing
    variants = _ablate_variants(man)
    if threads > 1:
        from .manifest import manifest_to_dict
        jobs = [(manifest_to_dict(man), axis, value, out, idx)
                for idx, (axis, value) in enumerate(variants)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            names = list(pool.map(_ablate_worker, jobs))
    else:
        names = [_run_ablate_variant(man, axis, value, out, idx)
                 for idx, (axis, value) in enumerate(variants)]
    return {"variants": names}


# -------------------------------------------------------------- report

_PLOT_RECIPE = """# Plot recipe

Every figure is rendered from the delimited files next to this folder, so any
plotting tool can reproduce them:

- distill/curves.csv (iter, vsd, cd, fake, lrm, ft) -> training-loss curves
- distill/samples.csv or samples.npz -> generated-sample scatter / sprite grid
- finetune/finetune_lrm.csv and finetune_ddpo.csv
  (iter, reward_pred, reward_true, w2) -> reward and drift curves per mode
- eval/timing.csv -> seconds per sampling grid
- */metrics.jsonl -> one JSON object per row: metric, value, std,
  config_hash, iter
"""


def _collect_metric_rows(out):
    found = []
    for root, _dirs, files in os.walk(out):
        if "metrics.jsonl" in files:
            stage = os.path.relpath(root, out)
            with open(os.path.join(root, "metrics.jsonl")) as fh:
                for line in fh:
                    row = json.loads(line)
                    row["stage"] = "." if stage == "." else stage
                    found.append(row)
    return found


def run_report(man, out, threads=1):
    rows = _collect_metric_rows(out)
    if not rows:
        raise PipelineError("no metric logs under the output directory; "
                            "run distill or eval first")
    folder = os.path.join(out, "report")
    os.makedirs(folder, exist_ok=True)
    rows.sort(key=lambda r: (r["stage"], r["metric"], str(r.get("variant", ""))))
    _write_csv(os.path.join(folder, "summary.csv"),
               ["stage", "metric", "value", "std", "iter", "variant",
                "config_hash"],
               [[r["stage"], r["metric"], r["value"], r.get("std"),
                 r.get("iter"), r.get("variant", ""), r["config_hash"]]
                for r in rows])
    with open(os.path.join(folder, "plots.md"), "w") as fh:
        fh.write(_PLOT_RECIPE)
    figures = _render_figures(man, out, folder)
    return {"rows": len(rows), "figures": figures}


def _render_figures(man, out, folder):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []

    curves = os.path.join(out, "distill", "curves.csv")
    if os.path.exists(curves):
        with open(curves) as fh:
            table = list(csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(7, 4))
        its = [int(r["iter"]) for r in table]
        for key in ("vsd", "cd", "fake", "lrm", "ft"):
            vals = [float(r[key]) for r in table]
            if any(v != 0.0 for v in vals):
                ax.plot(its, vals, label=key)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(folder, "curves.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    scatter = os.path.join(out, "distill", "samples.csv")
    montage = os.path.join(out, "distill", "samples.npz")
    if os.path.exists(scatter):
        with open(scatter) as fh:
            table = list(csv.DictReader(fh))
        xs = np.array([float(r["x"]) for r in table])
        ys = np.array([float(r["y"]) for r in table])
        ks = np.array([int(r["class"]) for r in table])
        data = build_dataset(man)
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(data.latents[:1024, 0], data.latents[:1024, 1],
                   s=4, c="lightgray", label="data")
        ax.scatter(xs, ys, s=4, c=ks, cmap="tab10", label="student")
        ax.set_aspect("equal")
        ax.legend(loc="upper right")
        fig.tight_layout()
        path = os.path.join(folder, "samples.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    elif os.path.exists(montage):
        blob = np.load(montage)
        pix = blob["pixels"][:64].reshape(-1, 8, 8)
        fig, axes = plt.subplots(8, 8, figsize=(6, 6))
        for img, ax in zip(pix, axes.ravel()):
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            ax.axis("off")
        fig.tight_layout()
        path = os.path.join(folder, "samples.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    ft_files = [(m, os.path.join(out, "finetune", f"finetune_{m}.csv"))
                for m in ("lrm", "ddpo")]
    present = [(m, p) for m, p in ft_files if os.path.exists(p)]
    if present:
        fig, (ax_r, ax_w) = plt.subplots(1, 2, figsize=(9, 4))
        for mode, path in present:
            with open(path) as fh:
                table = list(csv.DictReader(fh))
            its = [int(r["iter"]) for r in table]
            ax_r.plot(its, [float(r["reward_true"]) for r in table],
                      label=mode)
            ax_w.plot(its, [float(r["w2"]) for r in table], label=mode)
        ax_r.set_xlabel("iteration")
        ax_r.set_ylabel("true reward")
        ax_w.set_xlabel("iteration")
        ax_w.set_ylabel("W2 to data")
        ax_r.legend()
        ax_w.legend()
        fig.tight_layout()
        path = os.path.join(folder, "finetune.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    return written


STAGES = {
    "train-teacher": run_train_teacher,
    "train-codec": run_train_codec,
    "distill": run_distill,
    "finetune": run_finetune,
    "ablate": run_ablate,
    "eval": run_eval,
    "report": run_report,
}


def run_stage(command, man, out, threads=1):
    os.makedirs(out, exist_ok=True)
    save_manifest(man, os.path.join(out, "manifest.json"))
    return STAGES[command](man, out, threads=threads)
