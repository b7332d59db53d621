"""Command-line interface: dataset generation, training, inference, evaluation,
and gradient checking."""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from .autodiff import Tensor, no_grad
from .data import gen_synthetic, load_dataset, save_dataset
from .gradcheck import gradcheck as run_gradcheck
from .imgio import read_image, write_image
from .metrics import eval_run
from .train import load_model, parse_config_file, train as run_train


@click.group()
def main():
    """Hierarchical video frame interpolation toolkit."""


@main.command("gen-data")
@click.option("--count", type=int, default=16, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--motion-lo", type=float, default=2.0, show_default=True)
@click.option("--motion-hi", type=float, default=12.0, show_default=True)
@click.option("--interval", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def gen_data(count, size, motion_lo, motion_hi, interval, seed, out_dir):
    """Render a synthetic moving-shapes triplet dataset."""
    triplets = gen_synthetic(count, size, (motion_lo, motion_hi),
                             seed=seed, interval=interval)
    save_dataset(triplets, out_dir)
    click.echo(f"wrote {count} triplets to {out_dir}")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--resume", type=click.Path(exists=True), default=None)
@click.option("--log", "log_path", type=click.Path(), default=None,
              help="Loss log path (default: <out>.log)")
def train_cmd(config_path, data_dir, out_path, resume, log_path):
    """Train a model from a flat key=value config file."""
    train_cfg, model_cfg = parse_config_file(config_path)
    dataset = load_dataset(data_dir)
    log_path = log_path or out_path + ".log"
    with open(log_path, "a" if resume else "w") as fh:
        model, log = run_train(train_cfg, model_cfg, dataset,
                               out_path=out_path, resume=resume, log_fh=fh)
    click.echo(f"trained {model.num_parameters()} parameters; "
               f"checkpoint at {out_path}, loss log at {log_path}")


def _pad_to_divisible(img: np.ndarray, div: int) -> np.ndarray:
    _, h, w = img.shape
    ph = (-h) % div
    pw = (-w) % div
    if ph == 0 and pw == 0:
        return img
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="reflect")


@main.command("interp")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--frame0", type=click.Path(exists=True), required=True)
@click.option("--frame1", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def interp_cmd(model_path, frame0, frame1, out_path):
    """Interpolate the middle frame between two images."""
    model = load_model(model_path)
    a = read_image(frame0)
    b = read_image(frame1)
    if a.shape != b.shape:
        raise click.ClickException(
            f"frame sizes differ: {a.shape[1:]} vs {b.shape[1:]}")
    _, h, w = a.shape
    div = 2 ** (model.cfg.levels - 1)
    ap = _pad_to_divisible(a, div)
    bp = _pad_to_divisible(b, div)
    with no_grad():
        out = model.interpolate(Tensor(ap[None]), Tensor(bp[None]))
    write_image(out_path, out[0, :, :h, :w])
    click.echo(f"wrote {out_path}")


@main.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--intervals", default="1,2,3,4", show_default=True)
@click.option("--report", "report_path", type=click.Path(), required=True)
def eval_cmd(model_path, data_dir, intervals, report_path):
    """Evaluate PSNR/SSIM per frame interval; writes TSV + JSON reports."""
    model = load_model(model_path)
    dataset = load_dataset(data_dir)
    ivals = [int(s) for s in intervals.split(",") if s.strip()]
    div = 2 ** (model.cfg.levels - 1)

    def predict(fa, fb):
        _, h, w = fa.shape
        ap = _pad_to_divisible(fa, div)
        bp = _pad_to_divisible(fb, div)
        with no_grad():
            out = model.interpolate(Tensor(ap[None]), Tensor(bp[None]))
        return out[0, :, :h, :w]

    report = eval_run(predict, dataset, intervals=ivals,
                      model_id=Path(model_path).name)
    Path(report_path).write_text(report.to_tsv())
    Path(report_path).with_suffix(Path(report_path).suffix + ".json")\
        .write_text(report.to_json())
    click.echo(report.to_tsv(), nl=False)


def _gradcheck_registry():
    from . import autodiff as ad
    from .deformconv import DeformableKernel, deform_conv
    from .losses import census_loss

    rng = np.random.default_rng(7)

    def t(*shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    def img(*shape):
        return Tensor(rng.uniform(0.1, 0.9, shape), requires_grad=True)

    checks = {
        "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, stride=1, padding=1),
                   lambda: [t(2, 3, 6, 6), t(4, 3, 3, 3), t(4)]),
        "linear": (ad.linear, lambda: [t(3, 5), t(4, 5), t(4)]),
        "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b),
                       lambda: [t(3, 8), t(8), t(8)]),
        "softmax": (lambda x: ad.softmax(x, axis=-1), lambda: [t(4, 6)]),
        "gelu": (ad.gelu, lambda: [t(5, 5)]),
        "sigmoid": (ad.sigmoid, lambda: [t(5, 5)]),
        "matmul": (ad.matmul, lambda: [t(3, 4), t(4, 5)]),
        "bilinear_resize": (lambda x: ad.bilinear_resize(x, 0.5),
                            lambda: [t(1, 2, 8, 8)]),
        "bilinear_sample": (
            lambda x, cx, cy: ad.bilinear_sample(x, cx, cy),
            lambda: [t(1, 2, 6, 6), t(1, 1, 6, 6, scale=2.0),
                     t(1, 1, 6, 6, scale=2.0)]),
        "deform_conv": (
            lambda x, xo, yo, kv, kh, m: deform_conv(
                x, DeformableKernel(xo, yo, kv, kh, ad.sigmoid(m), 3)),
            lambda: [t(1, 2, 6, 6), t(9, 6, 6, scale=0.5),
                     t(9, 6, 6, scale=0.5), t(3, 6, 6), t(3, 6, 6),
                     t(9, 6, 6)]),
        "census_loss": (census_loss, lambda: [img(1, 3, 10, 10),
                                              img(1, 3, 10, 10)]),
    }
    return checks


@main.command("gradcheck")
@click.option("--op", "op_name", default=None,
              help="Check a single op (default: all).")
def gradcheck_cmd(op_name):
    """Compare analytic gradients against central finite differences."""
    checks = _gradcheck_registry()
    if op_name is not None and op_name not in checks:
        raise click.ClickException(
            f"unknown op {op_name!r}; known: {', '.join(sorted(checks))}")
    names = [op_name] if op_name else sorted(checks)
    failed = False
    for name in names:
        fn, make_inputs = checks[name]
        tol = 1e-3 if name == "layer_norm" else 1e-4
        report = run_gradcheck(fn, make_inputs(), tol=tol)
        status = "PASS" if report.passed else "FAIL"
        click.echo(f"{status}  {name:16s} max rel err {report.max_error:.3e}")
        failed = failed or not report.passed
    if failed:
        sys.exit(1)


if __name__ == "__main__":
    main()
