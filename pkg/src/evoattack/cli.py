"""Command-line client for the attack service.

By default each command talks to an in-process instance of the HTTP app, so
no server needs to be running; --server redirects the same requests to a
remote instance.  `serve` starts the HTTP app under uvicorn.

Exit codes: 0 success, 2 attack budget exhausted, 1 anything else.
"""

import asyncio
import json
import sys
from pathlib import Path

import click
import httpx
import numpy as np

from evoattack.harness import load_image, save_image, save_noise
from evoattack.service import app as service_app


def _call(server: str | None, path: str, payload: dict) -> dict:
    async def go():
        if server is None:
            transport = httpx.ASGITransport(app=service_app)
            client = httpx.AsyncClient(
                transport=transport, base_url="http://evoattack", timeout=None
            )
        else:
            client = httpx.AsyncClient(base_url=server, timeout=None)
        async with client:
            return await client.post(path, json=payload)

    try:
        response = asyncio.run(go())
    except httpx.HTTPError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        click.echo(f"error: {detail}", err=True)
        sys.exit(1)
    return response.json()


def _parse_reduced_dim(ctx, param, value):
    if value is None:
        return None
    try:
        h, w = value.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise click.BadParameter("expected HxW, e.g. 14x14")


def _attack_options(fn):
    opts = [
        click.option("--delta", type=float, default=0.3, show_default=True,
                     help="L-infinity radius of the perturbation"),
        click.option("--pop-size", type=int, default=6, show_default=True),
        click.option("--mutation-prob", type=float, default=5e-2, show_default=True),
        click.option("--alpha", type=float, default=1.0, show_default=True,
                     help="mutation range as a fraction of delta"),
        click.option("--tau", type=float, default=0.1, show_default=True,
                     help="selection temperature"),
        click.option("--adaptive", is_flag=True,
                     help="anneal mutation prob and range on fitness plateaus"),
        click.option("--reduced-dim", callback=_parse_reduced_dim, default=None,
                     metavar="HxW", help="optimize the noise at this resolution"),
        click.option("--fitness-samples", type=int, default=1, show_default=True),
        click.option("--confirm-repeats", type=int, default=1, show_default=True),
        click.option("--max-queries", type=int, default=100_000, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _defense_options(fn):
    opts = [
        click.option("--defense", type=click.Choice(["none", "bit_depth", "jpeg", "tvm"]),
                     default="none", show_default=True),
        click.option("--bits", type=int, default=5, show_default=True,
                     help="bits kept by the bit_depth defense"),
        click.option("--quality", type=int, default=75, show_default=True,
                     help="jpeg quality"),
        click.option("--tv-weight", type=float, default=0.1, show_default=True),
        click.option("--tv-iters", type=int, default=100, show_default=True),
        click.option("--dropout", type=float, default=0.5, show_default=True,
                     help="tvm pixel dropout rate"),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _attack_payload(delta, pop_size, mutation_prob, alpha, tau, adaptive,
                    reduced_dim, fitness_samples, max_queries, seed) -> dict:
    payload = {
        "delta_max": delta,
        "max_queries": max_queries,
        "population_size": pop_size,
        "mutation_prob": mutation_prob,
        "mutation_range": alpha,
        "temperature": tau,
        "adaptive": adaptive,
        "fitness_samples": fitness_samples,
        "rng_seed": seed,
    }
    if reduced_dim is not None:
        payload["reduced_height"], payload["reduced_width"] = reduced_dim
    return payload


def _defense_payload(defense, bits, quality, tv_weight, tv_iters, dropout) -> dict:
    return {
        "kind": defense,
        "bits_kept": bits,
        "quality": quality,
        "tv_weight": tv_weight,
        "solver_iters": tv_iters,
        "dropout_rate": dropout,
    }


def _image_payload(tensor) -> dict:
    h, w, c = tensor.shape
    return {"height": h, "width": w, "channels": c,
            "data": [float(v) for v in tensor.ravel()]}


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="remote service URL (default: run in-process)")
@click.pass_context
def main(ctx, server):
    """Query-only targeted attacks on image classifiers."""
    ctx.obj = server


@main.command()
@click.argument("image_path", type=click.Path(exists=True))
@click.argument("target", type=int)
@click.option("--model", required=True, help="server-side path to a GNW model")
@_attack_options
@_defense_options
@click.option("--out", type=click.Path(), default=None,
              help="write the adversarial image (plus raw-f32 noise sidecar) here")
@click.option("--json", "as_json", is_flag=True, help="print the full response")
@click.pass_obj
def attack(server, image_path, target, model, delta, pop_size, mutation_prob,
           alpha, tau, adaptive, reduced_dim, fitness_samples, confirm_repeats,
           max_queries, seed, defense, bits, quality, tv_weight, tv_iters,
           dropout, out, as_json):
    """Attack one PGM/PPM image toward TARGET."""
    try:
        original = load_image(image_path)
    except (OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    payload = {
        "model_path": model,
        "image": _image_payload(original),
        "target": target,
        "attack": _attack_payload(delta, pop_size, mutation_prob, alpha, tau,
                                  adaptive, reduced_dim, fitness_samples,
                                  max_queries, seed),
        "defense": _defense_payload(defense, bits, quality, tv_weight,
                                    tv_iters, dropout),
        "confirm_repeats": confirm_repeats,
    }
    body = _call(server, "/attack", payload)
    if as_json:
        click.echo(json.dumps(body, indent=2))
    else:
        click.echo(f"status: {body['status']}")
        click.echo(f"queries: {body['queries_used']}")
        click.echo(f"generations: {body['generations']}")
        click.echo(f"linf: {body['final_linf']:.6f}")
        click.echo(f"l2_per_pixel: {body['final_l2_per_pixel']:.8f}")
    if body["status"] == "success" and out is not None:
        img = body["adversarial_image"]
        adv = np.asarray(img["data"], dtype=np.float64).reshape(
            img["height"], img["width"], img["channels"]
        )
        save_image(out, adv)
        save_noise(str(out) + ".noise.f32", adv - original)
        click.echo(f"wrote {out}")
    if body["status"] != "success":
        sys.exit(2)


@main.command()
@click.argument("images_path")
@click.argument("labels_path", required=False, default=None)
@click.option("--model", required=True, help="server-side path to a GNW model")
@click.option("--samples", type=int, default=10, show_default=True,
              help="number of correctly classified examples to attack")
@click.option("--policy", type=click.Choice(["random_other", "fixed", "next_class"]),
              default="random_other", show_default=True)
@click.option("--fixed-class", type=int, default=None)
@_attack_options
@_defense_options
@click.option("--out", type=click.Path(), default=None,
              help="directory for report.json and adversarial images")
@click.option("--json", "as_json", is_flag=True, help="print the full report")
@click.pass_obj
def bench(server, images_path, labels_path, model, samples, policy, fixed_class,
          delta, pop_size, mutation_prob, alpha, tau, adaptive, reduced_dim,
          fitness_samples, confirm_repeats, max_queries, seed, defense, bits,
          quality, tv_weight, tv_iters, dropout, out, as_json):
    """Attack a dataset (IDX pair, image directory, or single image)."""
    payload = {
        "model_path": model,
        "images_path": images_path,
        "labels_path": labels_path,
        "sample_count": samples,
        "target_policy": policy,
        "fixed_class": fixed_class,
        "attack": _attack_payload(delta, pop_size, mutation_prob, alpha, tau,
                                  adaptive, reduced_dim, fitness_samples,
                                  max_queries, seed),
        "defense": _defense_payload(defense, bits, quality, tv_weight,
                                    tv_iters, dropout),
        "confirm_repeats": confirm_repeats,
        "output_dir": out,
    }
    body = _call(server, "/bench", payload)
    report = body["report"]
    if as_json:
        click.echo(json.dumps(report, indent=2))
    agg = report["aggregates"]
    click.echo(f"examples: {agg['examples']}")
    click.echo(f"attack_success_rate: {agg['attack_success_rate']:.4f}")
    click.echo(f"median_queries: {agg['median_queries']}")
    click.echo(f"mean_linf: {agg['mean_linf']}")
    click.echo(f"setup_queries: {agg['setup_queries']}")
    click.echo(f"wall_clock_sec: {body['wall_clock_sec']:.3f}")
    if agg["attack_success_rate"] == 0.0:
        sys.exit(2)


@main.command("defend-eval")
@click.argument("images_path")
@click.argument("labels_path")
@click.option("--model", required=True, help="server-side path to a GNW model")
@click.option("--samples", type=int, default=100, show_default=True)
@_defense_options
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_obj
def defend_eval(server, images_path, labels_path, model, samples, defense,
                bits, quality, tv_weight, tv_iters, dropout, seed):
    """Measure clean accuracy with and without a defense."""
    payload = {
        "model_path": model,
        "images_path": images_path,
        "labels_path": labels_path,
        "sample_count": samples,
        "defense": _defense_payload(defense, bits, quality, tv_weight,
                                    tv_iters, dropout),
        "seed": seed,
    }
    body = _call(server, "/defend-eval", payload)
    click.echo(f"examples: {body['examples']}")
    click.echo(f"clean_accuracy: {body['clean_accuracy']:.4f}")
    click.echo(f"defended_accuracy: {body['defended_accuracy']:.4f}")
    click.echo(f"queries: {body['queries']}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run(service_app, host=host, port=port)


if __name__ == "__main__":
    main()
