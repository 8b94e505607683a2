"""Acceptance suite: one pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python3 tests/test_acceptance.py``.
"""
import math
import struct
import subprocess
import sys
import time

import numpy as np
import pytest

from starvqa import tensor as T
from starvqa.anchors import AnchorCodec, encode_mos, nearest_anchor, vr_loss
from starvqa.config import ModelConfig, TrainConfig
from starvqa.errors import FormatError
from starvqa.gradcheck import TINY, check_model
from starvqa.io import (Checkpoint, decode_checkpoint, decode_container, dump_manifest, encode_checkpoint,
                        encode_container, parse_manifest)
from starvqa.metrics import plcc, srocc
from starvqa.model import StarVQA
from starvqa.synth import make_synthetic_dataset
from starvqa.tokenizer import RawVideo, tokenize
from starvqa.training import (count_forward_macs, estimate_flops, evaluate, lr_schedule, train_stage_image,
                              train_stage_video, transfer_weights)

RESULTS: dict[int, str] = {}


def record(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'} {title}: {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


# -- 1 ---------------------------------------------------------------------

def test_1_gradient_integrity():
    report = check_model(TINY, seed=0)
    ok = report.passed(1e-3) and report.seconds < 60
    record(1, "gradient integrity", ok,
           f"worst rel err {report.worst:.2e} over {report.n_entries} entries, {report.seconds:.1f}s")


# -- 2 ---------------------------------------------------------------------

def _random_model(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(n_frames=int(rng.integers(1, 5)), crop=int(rng.choice([4, 6])), patch=2,
                      embed_dim=8, heads=int(rng.choice([1, 2, 4])), blocks=2)
    model = StarVQA(cfg, seed=seed)
    for k, p in model.params.items():  # spread weights so attention is far from uniform
        p.data = rng.normal(0, 0.5, size=p.shape)
    x = rng.normal(size=(2, cfg.n_frames, cfg.n_patches, cfg.patch_dim))
    return cfg, model, x


def test_2_attention_invariants():
    worst_sum, worst_perm, bad_len = 0.0, 0.0, 0
    for seed in range(100):
        cfg, model, x = _random_model(seed)
        trace = {}
        model.encode(x, trace)
        for a in trace["time"]:
            bad_len += a.shape[-1] != cfg.n_frames + 1
            worst_sum = max(worst_sum, np.abs(a.sum(-1) - 1).max())
        for a in trace["space"]:
            bad_len += a.shape[-1] != cfg.n_patches + 1
            worst_sum = max(worst_sum, np.abs(a.sum(-1) - 1).max())
        model.params["embed.pos_temporal"].data[:] = 0.0
        perm = np.random.default_rng(seed).permutation(cfg.n_frames)
        a, b = model.encode(x).data, model.encode(x[:, perm]).data
        worst_perm = max(worst_perm, np.abs(a - b).max())
    ok = bad_len == 0 and worst_sum < 1e-6 and worst_perm < 1e-9
    record(2, "attention invariants", ok,
           f"{bad_len} bad lengths, max |sum-1| {worst_sum:.1e}, max permutation diff {worst_perm:.1e}")


# -- 3 ---------------------------------------------------------------------

def _oracle_encode(c, anchors):
    w = [math.exp(-(c - b) ** 2) for b in anchors]
    z = math.fsum(w)
    return [v / z for v in w]


def _oracle_cos_loss(y, p):
    dot = math.fsum(a * b for a, b in zip(y, p))
    return 1.0 - dot / (math.sqrt(math.fsum(a * a for a in y)) * math.sqrt(math.fsum(b * b for b in p)))


def _oracle_pearson(x, y):
    mx, my = math.fsum(x) / len(x), math.fsum(y) / len(y)
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def _oracle_ranks(x):
    return [sum(v < a for v in x) + (sum(v == a for v in x) + 1) / 2 for a in x]


def _oracle_srocc(x, y):
    return _oracle_pearson(_oracle_ranks(x), _oracle_ranks(y))


def test_3_codec_oracles():
    rng = np.random.default_rng(2024)
    worst = {"encode_mos": 0.0, "vr_loss": 0.0, "srocc": 0.0, "plcc": 0.0}
    argmax_bad = 0
    for case in range(1000):
        m = int(rng.integers(2, 10))
        lo = float(rng.uniform(-3, 3))
        codec = AnchorCodec(m, lo, lo + float(rng.uniform(0.5, 10)))
        c = float(rng.uniform(codec.lo, codec.hi))
        y = encode_mos(c, codec)
        worst["encode_mos"] = max(worst["encode_mos"],
                                  max(abs(a - b) for a, b in zip(y, _oracle_encode(c, codec.anchors))))
        dist = np.abs(c - codec.anchors)
        if np.sort(dist)[1] - np.sort(dist)[0] > 1e-9:
            argmax_bad += int(np.argmax(y)) != int(nearest_anchor(c, codec))
        p = rng.dirichlet(np.ones(m))
        worst["vr_loss"] = max(worst["vr_loss"], abs(vr_loss(y, p) - _oracle_cos_loss(y, p)))
        n = int(rng.integers(3, 30))
        if case % 2:
            g, q = rng.integers(0, 5, size=n).astype(float), rng.integers(0, 5, size=n).astype(float)
        else:
            g, q = rng.normal(size=n), rng.normal(size=n)
        if np.ptp(g) == 0 or np.ptp(q) == 0:
            g[0], q[0] = g[0] + 1.0, q[0] - 1.0
        worst["srocc"] = max(worst["srocc"], abs(srocc(g, q) - _oracle_srocc(list(g), list(q))))
        worst["plcc"] = max(worst["plcc"], abs(plcc(g, q) - _oracle_pearson(list(g), list(q))))
    y = encode_mos(2.3, AnchorCodec())
    exact = vr_loss(y, y) == 0.0 and all(vr_loss(np.eye(6)[i], np.eye(6)[j]) == 1.0
                                         for i in range(6) for j in range(6) if i != j)
    exact = exact and vr_loss(y, T.Tensor(y)).item() == 0.0
    ok = max(worst.values()) < 1e-10 and argmax_bad == 0 and exact
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(3, "codec/metric oracles", ok, f"{detail}; argmax misses {argmax_bad}; exact identities {exact}")


# -- 4 ---------------------------------------------------------------------

def test_4_constants():
    cfg = TrainConfig()
    anchors = AnchorCodec(cfg.model.anchors, cfg.model.lo, cfg.model.hi).anchors
    checks = {
        "lr(0)=0.005": lr_schedule(0, cfg) == 0.005,
        "lr(10)=0.0005": lr_schedule(10, cfg) == 0.0005,
        "m=6": cfg.model.anchors == 6 and anchors.size == 6,
        "b0=L,b5=U": anchors[0] == cfg.model.lo and anchors[5] == cfg.model.hi,
        "16 frames": cfg.model.n_frames == 16,
    }
    record(4, "default constants", all(checks.values()), ", ".join(f"{k} {v}" for k, v in checks.items()))


# -- 5 ---------------------------------------------------------------------

def test_5_transfer_identity(tmp_path):
    start = time.perf_counter()
    manifest = make_synthetic_dataset(tmp_path, count=6, frames=2, size=16, seed=5)
    model_cfg = ModelConfig(n_frames=4, crop=16, patch=4, embed_dim=24, heads=4, blocks=2)
    cfg = TrainConfig(model=model_cfg, epochs=2, batch=3)
    image_ckpt = train_stage_image(manifest, cfg)
    video = transfer_weights(image_ckpt, cfg).model
    image = StarVQA(model_cfg.replace(mode="image", n_frames=1), image_ckpt.params)
    x = np.random.default_rng(0).normal(size=(4, 1, model_cfg.n_patches, model_cfg.patch_dim))
    diff = np.abs(video.logits(x).data - image.logits(x).data).max()
    space = [k for k in image_ckpt.params if ".space." in k]
    identical = all(video.params[k].data.tobytes() == image_ckpt.params[k].tobytes() for k in space)
    zero_temporal = not video.params["embed.pos_temporal"].data.any()
    seconds = time.perf_counter() - start
    ok = diff < 1e-9 and identical and zero_temporal and seconds < 30
    record(5, "co-training transfer identity", ok,
           f"max output diff {diff:.1e}, {len(space)} space tensors bit-identical {identical}, {seconds:.1f}s")


# -- 6 ---------------------------------------------------------------------

LEARN_MODEL = ModelConfig(n_frames=8, crop=64, patch=16, embed_dim=96, heads=4, blocks=4)


def test_6_learnability(tmp_path):
    start = time.perf_counter()
    manifest = make_synthetic_dataset(tmp_path, count=40, frames=16, size=64, seed=0)
    cfg = TrainConfig(model=LEARN_MODEL, epochs=60, batch=8, decay_every=60, seed=0)
    ckpt = train_stage_video(manifest, cfg)
    rows = {r["split"]: r for r in evaluate(ckpt, manifest)}
    seconds = time.perf_counter() - start
    ok = (rows["train"]["n"] == 32 and rows["test"]["n"] == 8 and rows["train"]["srocc"] >= 0.9
          and rows["test"]["srocc"] >= 0.6 and seconds < 1200)
    record(6, "desk-scale learnability", ok,
           f"train SROCC {rows['train']['srocc']:.3f} (n={rows['train']['n']}), held-out SROCC "
           f"{rows['test']['srocc']:.3f} (n={rows['test']['n']}), {seconds:.0f}s")


# -- 7 ---------------------------------------------------------------------

def test_7_resolution_independent_cost():
    cfg = ModelConfig()
    counts, shapes = {}, set()
    for name, hw in {"540p": (540, 960), "720p": (720, 1280), "1080p": (1080, 1920)}.items():
        video = RawVideo(np.zeros((2, *hw, 3), dtype=np.uint8))
        shapes.add(tokenize(video, cfg.n_frames, cfg.crop, cfg.patch).shape)
        counts[name] = estimate_flops(cfg, hw)
    x = np.random.default_rng(0).normal(size=(1, TINY.n_frames, TINY.n_patches, TINY.patch_dim))
    measured, predicted = count_forward_macs(StarVQA(TINY), x), estimate_flops(TINY)
    ok = len(set(counts.values())) == 1 and len(shapes) == 1 and measured == predicted
    record(7, "resolution-independent cost", ok,
           f"{counts['540p']} MACs at every resolution, tokens {shapes.pop()}; tiny config "
           f"counted {measured} vs closed form {predicted}")


# -- 8 ---------------------------------------------------------------------

def _corruptions(buf: bytes, header_len: int):
    for n in range(len(buf)):
        yield buf[:n]
    for i in range(header_len):
        for v in (0, 255, buf[i] ^ 1):
            b = bytearray(buf)
            b[i] = v
            yield bytes(b)
    yield buf + b"\x00"


def test_8_format_durability(tmp_path):
    video = RawVideo(np.random.default_rng(0).integers(0, 256, size=(2, 3, 5, 3), dtype=np.uint8))
    vbuf = encode_container(video)
    round_trip = encode_container(decode_container(vbuf)) == vbuf
    model = StarVQA(TINY)
    ck = Checkpoint(TrainConfig(model=TINY).to_dict(), "video", model.state_dict(), decoder=None,
                    datasets={"d": [0.0, 1.0]}, meta={"epoch": 0})
    cbuf = encode_checkpoint(ck)
    round_trip &= encode_checkpoint(decode_checkpoint(cbuf)) == cbuf
    man_text = dump_manifest(make_synthetic_dataset(tmp_path / "m", count=3, frames=1, size=4))
    round_trip &= dump_manifest(parse_manifest(man_text)) == man_text

    crashes, named = [], 0
    hlen = struct.unpack_from("<I", cbuf, 5)[0] + 9
    cases = [(decode_container, b) for b in _corruptions(vbuf, 17)]
    cases += [(decode_checkpoint, b) for b in _corruptions(cbuf[:hlen + 64], 0)]
    rng = np.random.default_rng(8)
    for _ in range(300):
        b = bytearray(cbuf)
        for i in rng.integers(0, hlen, size=2):
            b[i] = int(rng.integers(32, 127))
        cases.append((decode_checkpoint, bytes(b)))
    for fn, b in cases:
        try:
            fn(b)
        except FormatError:
            named += 1
        except Exception as exc:  # noqa: BLE001 - any other type is a failure
            crashes.append(f"{fn.__name__}: {type(exc).__name__}: {exc}")

    start = time.perf_counter()
    work = tmp_path / "cli"
    cfg = work / "cfg.json"
    work.mkdir()
    cfg.write_text('{"n_frames": 4, "crop": 16, "patch": 4, "embed_dim": 24, "heads": 2, "blocks": 2, "batch": 4}')
    data, ck_path = work / "data", work / "model.svqc"
    cmds = [
        ["make-synth", "--out", str(data), "--count", "8", "--frames", "8", "--size", "24"],
        ["train", "--manifest", str(data / "manifest.json"), "--config", str(cfg), "--epochs", "2",
         "--out", str(ck_path)],
        ["eval", "--manifest", str(data / "manifest.json"), "--checkpoint", str(ck_path)],
        ["infer", "--checkpoint", str(ck_path), "--video", str(data / "synth_000.svqv"), "--dataset", "synth"],
    ]
    codes = []
    for argv in cmds:
        proc = subprocess.run([sys.executable, "-m", "starvqa.cli", "--seed", "0", "--deterministic", *argv],
                              capture_output=True, text=True)
        codes.append(proc.returncode)
    cli_seconds = time.perf_counter() - start
    ok = round_trip and not crashes and all(c == 0 for c in codes) and cli_seconds < 300
    record(8, "format durability", ok,
           f"round trips byte-identical {round_trip}; {named} corruptions raised named errors, "
           f"{len(crashes)} crashed{(' (' + crashes[0] + ')') if crashes else ''}; CLI exit codes {codes} "
           f"in {cli_seconds:.1f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
