"""Package-level acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line with the measured numbers
(always visible, even under output capture) and asserts the same facts:

1. gradient suite: finite differences confirm every tensor op and the
   full loss gradient for all parameter tensors;
2. oracle equivalence: loss values match scalar-loop references on
   random micro-batches;
3. degenerate exactness: single-pair batches, huge temperature, and
   single-sentence reports hit their closed-form values;
4. metric identities: dice and IoU satisfy their algebraic relation and
   exact special cases;
5. aggregation exactness: word, sentence, and report embeddings are
   bit-exact sums/means of their parts;
6. end-to-end synthetic grounding: training improves the loss, the
   grounding IoU, and argmax localization on generated data;
7. reproducibility: two identical CLI pipeline runs emit byte-identical
   artifacts.
"""

import time

import numpy as np

import oracles
from galign import diffmath as dm
from galign import losses as ls
from galign.cli import main
from galign.grounding import argmax_patch, dice, evaluate, ground, iou
from galign.synthbench import SynthSpec, coarse_cell_bounds, generate
from galign.textenc import (
    UNK,
    TextEmbeddings,
    TextParams,
    Vocab,
    embed_report,
    init_text_params,
    tokenize_report,
)
from galign.trainer import (
    PARAM_NAMES,
    AdamState,
    Checkpoint,
    ModelConfig,
    ModelParams,
    TrainConfig,
    train,
)
from galign.visenc import (
    FeatureGrid,
    GlobalFeature,
    ImageSample,
    VisionParams,
    encode_image,
)


def _verdict(capsys, number: int, label: str, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {number} ({label}): {'PASS' if ok else 'FAIL'} [{detail}]")
    assert ok, f"criterion {number} ({label}): {detail}"


def _sum_all(node: dm.Node) -> dm.Node:
    while node.ndim > 0:
        node = dm.sum_axis(node, axis=0)
    return node


def _text_of(sentences: np.ndarray) -> TextEmbeddings:
    node = dm.constant(sentences)
    report = dm.constant(sentences.mean(axis=1, keepdims=True))
    return TextEmbeddings(pieces=node, words=node, sentences=node, report=report)


def _grid_of(features: np.ndarray) -> FeatureGrid:
    return FeatureGrid(
        features=dm.constant(features),
        grid_h=1,
        grid_w=features.shape[1],
        patch_size=4,
    )


def _item_of(sentences, features, glob) -> ls.PairedItem:
    return ls.PairedItem(
        text=_text_of(sentences),
        grid=_grid_of(features),
        global_feature=GlobalFeature(feature=dm.constant(glob)),
    )


def _cols(arr: np.ndarray) -> list[list[float]]:
    return [arr[:, j].tolist() for j in range(arr.shape[1])]


# ---------------------------------------------------------------------------
# 1. Gradient suite
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    a34 = rng.normal(size=(3, 4))
    b34 = rng.normal(size=(3, 4))
    b42 = rng.normal(size=(4, 2))
    c32 = rng.normal(size=(3, 2))
    positive = rng.uniform(0.5, 2.0, size=(3, 4))
    off_zero = rng.uniform(0.2, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    table = rng.normal(size=(5, 4))

    cases = [
        ("matmul", a34, lambda leaf: dm.tensor_op("matmul", [leaf, dm.constant(b42)])),
        ("matmul", b42, lambda leaf: dm.tensor_op("matmul", [dm.constant(a34), leaf])),
        ("add", a34, lambda leaf: dm.tensor_op("add", [leaf, dm.constant(b34)])),
        ("sub", a34, lambda leaf: dm.tensor_op("sub", [leaf, dm.constant(b34)])),
        ("scale", a34, lambda leaf: dm.tensor_op("scale", [leaf], factor=1.7)),
        (
            "elementwise_mul",
            a34,
            lambda leaf: dm.tensor_op("elementwise_mul", [leaf, dm.constant(b34)]),
        ),
        ("exp", a34, lambda leaf: dm.tensor_op("exp", [leaf])),
        ("log", positive, lambda leaf: dm.tensor_op("log", [leaf])),
        ("sum_axis", a34, lambda leaf: dm.tensor_op("sum_axis", [leaf], axis=1)),
        (
            "mean_axis",
            a34,
            lambda leaf: dm.tensor_op("mean_axis", [leaf], axis=0, keepdims=True),
        ),
        (
            "softmax_rows",
            a34,
            lambda leaf: dm.tensor_op("softmax_rows", [leaf], temperature=0.7),
        ),
        (
            "logsumexp_rows",
            a34,
            lambda leaf: dm.tensor_op("logsumexp_rows", [leaf], temperature=0.7),
        ),
        (
            "l2_normalize_cols",
            off_zero,
            lambda leaf: dm.tensor_op("l2_normalize_cols", [leaf]),
        ),
        ("transpose", a34, lambda leaf: dm.tensor_op("transpose", [leaf])),
        (
            "concat_cols",
            a34,
            lambda leaf: dm.tensor_op("concat_cols", [leaf, dm.constant(c32)]),
        ),
        ("relu", off_zero, lambda leaf: dm.tensor_op("relu", [leaf])),
        (
            "gather_rows",
            table,
            lambda leaf: dm.tensor_op("gather_rows", [leaf], indices=[0, 2, 1, 2]),
        ),
    ]
    assert {kind for kind, _, _ in cases} == set(dm.TENSOR_OP_KINDS)

    reports = []
    for kind, base, build in cases:
        out_shape = build(dm.constant(base)).shape
        weights = np.random.default_rng(11).normal(size=out_shape)

        def scalar_fn(leaf, build=build, weights=weights):
            return _sum_all(dm.elementwise_mul(build(leaf), dm.constant(weights)))

        reports.append(dm.grad_check(scalar_fn, dm.constant(base), h=1e-5, name=kind))

    # Full loss gradient: B=3 pairs, feature dim 4, 4 grid cells (4x4
    # images with 2x2 patches), 2 sentences per report, seed 0 throughout.
    model_cfg = ModelConfig(
        dim=4, patch_size=2, text_hidden=3, vision_hidden=5, table_init_scale=0.05
    )
    loss_cfg = ls.LossConfig()
    vocab = Vocab.build(["shade", "spot", "faint", "broad", "patch", "zone"])
    reports_text = [
        "faint spot. broad zone.",
        "broad patch. faint shade.",
        "spot zone. patch spot.",
    ]
    toks = [tokenize_report(text, vocab) for text in reports_text]
    data_rng = np.random.default_rng(0)
    images = [
        ImageSample(pixels=data_rng.uniform(0.0, 1.0, size=(4, 4))) for _ in range(3)
    ]
    arrays = ModelParams.init(model_cfg, len(vocab), seed=0).arrays()

    def loss_with(target):
        def f(leaf):
            nodes = {
                name: (leaf if name == target else dm.parameter(arr))
                for name, arr in arrays.items()
            }
            text = TextParams(
                table=nodes["text.table"],
                w1=nodes["text.w1"],
                b1=nodes["text.b1"],
                w2=nodes["text.w2"],
                b2=nodes["text.b2"],
            )
            vision = VisionParams(
                w1=nodes["vision.w1"],
                b1=nodes["vision.b1"],
                w2=nodes["vision.w2"],
                b2=nodes["vision.b2"],
                wg=nodes["vision.wg"],
                bg=nodes["vision.bg"],
                patch_size=model_cfg.patch_size,
            )
            items = []
            for image, tok in zip(images, toks):
                grid, glob = encode_image(image, vision)
                emb = embed_report(tok, text)
                items.append(ls.PairedItem(text=emb, grid=grid, global_feature=glob))
            return ls.total_loss(ls.PairedBatch(items=items), loss_cfg).total

        return f

    for name in PARAM_NAMES:
        reports.append(
            dm.grad_check(
                loss_with(name),
                dm.constant(arrays[name]),
                h=1e-5,
                name=f"total_loss/{name}",
            )
        )

    worst = max(reports, key=lambda r: r.max_rel_err)
    elapsed = time.perf_counter() - start
    ok = worst.max_rel_err < 1e-4 and elapsed < 30.0
    _verdict(
        capsys,
        1,
        "gradient suite",
        ok,
        f"{len(reports)} checks, max_rel_err={worst.max_rel_err:.2e}"
        f" at {worst.op_name}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. Oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_2_oracle_equivalence(capsys):
    start = time.perf_counter()
    cfg = ls.LossConfig()
    max_rel = 0.0
    for trial in range(20):
        rng = np.random.default_rng([2, trial])
        b = int(rng.integers(1, 5))
        m = int(rng.integers(1, 7))
        d = 5
        items, v_globals, t_globals, v_local_sets, t_sentence_sets = [], [], [], [], []
        for _ in range(b):
            p = int(rng.integers(1, 4))
            sentences = rng.normal(size=(d, p))
            features = rng.normal(size=(d, m))
            glob = rng.normal(size=(d, 1))
            items.append(_item_of(sentences, features, glob))
            v_globals.append(glob[:, 0].tolist())
            t_globals.append(sentences.mean(axis=1).tolist())
            v_local_sets.append(_cols(features))
            t_sentence_sets.append(_cols(sentences))

        got = ls.total_loss(ls.PairedBatch(items=items), cfg)
        want_g_vt, want_g_tv = oracles.global_losses(v_globals, t_globals, cfg.tau1)
        want_l_vt, want_l_tv = oracles.local_losses(
            v_local_sets, t_sentence_sets, cfg.tau1, cfg.tau2, cfg.tau3
        )
        pairs = [
            (got.global_image_to_text.item(), want_g_vt),
            (got.global_text_to_image.item(), want_g_tv),
            (got.local_image_to_text.item(), want_l_vt),
            (got.local_text_to_image.item(), want_l_tv),
            (got.total.item(), want_g_vt + want_g_tv + want_l_vt + want_l_tv),
        ]
        for have, want in pairs:
            max_rel = max(max_rel, abs(have - want) / max(abs(want), 1e-12))

    elapsed = time.perf_counter() - start
    ok = max_rel < 1e-9 and elapsed < 10.0
    _verdict(
        capsys,
        2,
        "oracle equivalence",
        ok,
        f"20 micro-batches, max_rel_err={max_rel:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3. Degenerate exactness
# ---------------------------------------------------------------------------


def test_criterion_3_degenerate_exactness(capsys):
    cfg = ls.LossConfig()

    # (a) single-pair batch: every component is exactly zero.
    rng = np.random.default_rng(31)
    solo = ls.PairedBatch(
        items=[
            _item_of(
                rng.normal(size=(5, 3)), rng.normal(size=(5, 4)), rng.normal(size=(5, 1))
            )
        ]
    )
    single_pair_max = max(abs(c.item()) for c in ls.total_loss(solo, cfg).components())

    # (b) huge InfoNCE temperature flattens every softmax toward uniform,
    # so each component approaches log B.  Basis-vector embeddings keep
    # the raw score spread at machine scale relative to the temperature.
    b, d = 3, 4
    eye = np.eye(d)
    flat_cfg = ls.LossConfig(tau1=1e6, tau2=cfg.tau2, tau3=cfg.tau3)
    flat_batch = ls.PairedBatch(
        items=[
            _item_of(eye[:, [i]], eye[:, [i]], eye[:, [i]].copy()) for i in range(b)
        ]
    )
    flat_dev = max(
        abs(c.item() - np.log(b)) for c in ls.total_loss(flat_batch, flat_cfg).components()
    )

    # (c) one sentence: the smooth maximum reduces to that sentence's
    # cosine match with its attention context.
    rng = np.random.default_rng(32)
    sentences = rng.normal(size=(6, 1))
    features = rng.normal(size=(6, 5))
    item = _item_of(sentences, features, rng.normal(size=(6, 1)))
    z = ls.pair_scores(ls.PairedBatch(items=[item]), cfg).values[0, 0]
    sim = ls.local_similarity(item.grid, item.text.sentences)
    context = ls.context_features(sim, item.grid, cfg.tau2).values[:, 0]
    cos = oracles.cosine(context.tolist(), sentences[:, 0].tolist())
    z_dev = abs(z - cos)

    ok = single_pair_max < 1e-12 and flat_dev < 1e-6 and z_dev < 1e-12
    _verdict(
        capsys,
        3,
        "degenerate exactness",
        ok,
        f"B=1 max|component|={single_pair_max:.1e},"
        f" tau1=1e6 max|component-log B|={flat_dev:.1e},"
        f" P=1 |Z-cosine|={z_dev:.1e}",
    )


# ---------------------------------------------------------------------------
# 4. Metric identities
# ---------------------------------------------------------------------------


def test_criterion_4_metric_identities(capsys):
    rng = np.random.default_rng(4)
    max_dev = 0.0
    for _ in range(1000):
        a = rng.random((12, 17)) < 0.4
        b = rng.random((12, 17)) < 0.4
        i = iou(a, b)
        max_dev = max(max_dev, abs(dice(a, b) - 2.0 * i / (1.0 + i)))

    same = rng.random((9, 9)) < 0.5
    disjoint_a = np.zeros((6, 6), dtype=bool)
    disjoint_a[:3] = True
    full = np.ones((8, 8), dtype=bool)
    left_half = np.zeros((8, 8), dtype=bool)
    left_half[:, :4] = True

    exact = (
        iou(same, same) == 1.0
        and dice(same, same) == 1.0
        and iou(disjoint_a, ~disjoint_a) == 0.0
        and dice(disjoint_a, ~disjoint_a) == 0.0
        and iou(left_half, full) == 0.5
        and dice(left_half, full) == 2.0 / 3.0
    )
    ok = max_dev < 1e-12 and exact
    _verdict(
        capsys,
        4,
        "metric identities",
        ok,
        f"1000 pairs max|dice-2iou/(1+iou)|={max_dev:.1e}, special cases exact={exact}",
    )


# ---------------------------------------------------------------------------
# 5. Aggregation exactness
# ---------------------------------------------------------------------------


def test_criterion_5_aggregation_exactness(capsys):
    vocab = Vocab(
        pieces=(UNK, "le", "sion", "small", "in", "the", "up", "per", "left", "ring")
    )
    params = init_text_params(seed=0, vocab_size=len(vocab), dim=6, hidden=5, table_scale=0.5)
    tok = tokenize_report("small lesion in the upper left. ring lesion.", vocab)
    assert tok.n_sentences == 2 and max(tok.word_boundaries) == 2

    emb = embed_report(tok, params)
    pieces = emb.pieces.values

    def grouped_sums(matrix: np.ndarray, sizes: list[int]) -> np.ndarray:
        out = np.empty((matrix.shape[0], len(sizes)))
        start = 0
        for j, size in enumerate(sizes):
            acc = matrix[:, start].copy()
            for c in range(start + 1, start + size):
                acc = acc + matrix[:, c]
            out[:, j] = acc
            start += size
        return out

    hand_words = grouped_sums(pieces, tok.word_boundaries)
    hand_sentences = grouped_sums(hand_words, tok.sentence_boundaries)
    hand_report = (hand_sentences[:, 0] + hand_sentences[:, 1]) / 2.0

    words_exact = bool((emb.words.values == hand_words).all())
    sentences_exact = bool((emb.sentences.values == hand_sentences).all())
    report_exact = bool((emb.report.values[:, 0] == hand_report).all())
    ok = words_exact and sentences_exact and report_exact
    _verdict(
        capsys,
        5,
        "aggregation exactness",
        ok,
        f"words bit-exact={words_exact}, sentences bit-exact={sentences_exact},"
        f" report bit-exact={report_exact}",
    )


# ---------------------------------------------------------------------------
# 6. End-to-end synthetic grounding
# ---------------------------------------------------------------------------

_ROW_INDEX = {"upper": 0, "middle": 1, "lower": 2}
_COL_INDEX = {"left": 0, "center": 1, "right": 2}


def _argmax_hits(samples, ckpt, bounds) -> tuple[int, int]:
    """Count single-lesion samples whose argmax patch center falls in the
    coarse 3x3 cell holding the lesion."""
    singles = [s for s in samples if len(s.lesions) == 1]
    hits = 0
    for sample in singles:
        smap = ground(sample.report, sample.image, ckpt)
        r, c = argmax_patch(smap)
        cy = r * smap.patch_size + (smap.patch_size - 1) / 2
        cx = c * smap.patch_size + (smap.patch_size - 1) / 2
        ri = _ROW_INDEX[sample.lesions[0].row]
        ci = _COL_INDEX[sample.lesions[0].col]
        if bounds[ri] <= cy < bounds[ri + 1] and bounds[ci] <= cx < bounds[ci + 1]:
            hits += 1
    return hits, len(singles)


def test_criterion_6_end_to_end_grounding(capsys):
    start = time.perf_counter()
    spec = SynthSpec(shapes=("blob", "ring", "bar"), seed=0)
    train_samples, test_samples, vocab = generate(spec)
    bounds = coarse_cell_bounds(spec.image_size)
    cfg = TrainConfig()

    # The untrained score is the derived baseline, measured before training.
    arrays = ModelParams.init(cfg.model, len(vocab), cfg.seed).arrays()
    untrained = Checkpoint(
        params=arrays,
        adam=AdamState.zeros(arrays),
        epoch=0,
        rng_state=np.random.default_rng(cfg.seed).bit_generator.state,
        config=cfg,
        vocab_pieces=vocab.pieces,
    )
    base = evaluate(test_samples, untrained)

    pairs = [(s.image, s.report) for s in train_samples]
    ckpt, logs = train(pairs, vocab, cfg)
    trained = evaluate(test_samples, ckpt)
    hits, singles = _argmax_hits(test_samples, ckpt, bounds)
    elapsed = time.perf_counter() - start

    loss_drops = logs[-1].total < logs[0].total
    ratio = trained.mean_iou / base.mean_iou if base.mean_iou > 0 else float("inf")
    iou_improves = trained.mean_iou >= 3.0 * base.mean_iou
    localizes = hits / singles >= 0.6
    ok = loss_drops and iou_improves and localizes and elapsed < 900.0
    _verdict(
        capsys,
        6,
        "end-to-end synthetic grounding",
        ok,
        f"(a) epoch totals {logs[0].total:.4f}->{logs[-1].total:.4f},"
        f" (b) mean_iou {base.mean_iou:.6f}->{trained.mean_iou:.6f} ({ratio:.2f}x),"
        f" (c) argmax-in-cell {hits}/{singles}={hits / singles:.1%}, {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 7. Reproducibility
# ---------------------------------------------------------------------------


def test_criterion_7_byte_reproducibility(capsys, tmp_path):
    start = time.perf_counter()
    config = tmp_path / "run.json"
    config.write_text(
        '{"data": {"train_count": 64, "test_count": 16},'
        ' "train": {"batch_size": 16, "epochs": 2}}',
        encoding="utf-8",
    )
    artifacts = []
    for name in ("first", "second"):
        root = tmp_path / name
        data, model, report = root / "data", root / "model", root / "eval"
        assert main(["gen-data", "--config", str(config), "--out", str(data)]) == 0
        assert (
            main(
                ["train", "--config", str(config), "--data", str(data), "--out", str(model)]
            )
            == 0
        )
        assert (
            main(
                [
                    "eval",
                    "--config",
                    str(config),
                    "--ckpt",
                    str(model / "ckpt.bin"),
                    "--data",
                    str(data),
                    "--out",
                    str(report),
                ]
            )
            == 0
        )
        artifacts.append(
            (
                (model / "ckpt.bin").read_bytes(),
                (report / "metrics.json").read_bytes(),
            )
        )

    ckpt_same = artifacts[0][0] == artifacts[1][0]
    metrics_same = artifacts[0][1] == artifacts[1][1]
    elapsed = time.perf_counter() - start
    ok = ckpt_same and metrics_same
    _verdict(
        capsys,
        7,
        "byte reproducibility",
        ok,
        f"checkpoint identical={ckpt_same} ({len(artifacts[0][0])} bytes),"
        f" metrics identical={metrics_same}, {elapsed:.0f}s",
    )
