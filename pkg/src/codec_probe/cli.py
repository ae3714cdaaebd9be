"""codec-probe command line.

Subcommands: validate, synth, assoc, topk, tsne, mi, train, analyze,
generate, convert, report. Declared outputs are written atomically (temp
file in the target directory, then rename), and a failed run leaves no new
files at the declared paths. Exit codes: 0 success, 1 usage error, 2 data
error, 3 numeric failure. Log verbosity comes from CODEC_PROBE_LOG
(error | info | debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from . import ancogen, assoc, metrics, mi, projection, synth
from .corpus import (
    AttributeStreams,
    BinningConfig,
    CodecStream,
    TokenCorpus,
    Utterance,
    align_streams,
    load_corpus,
    quantize_attributes,
    read_codebooks,
    write_corpus,
)

log = logging.getLogger("codec_probe")

PRESETS = {
    "two-scale-disentangled": synth.two_scale_disentangled_spec,
    "semantic-first": synth.semantic_first_spec,
    "noise": synth.noise_spec,
}


def _atomic(path, writer):
    """Run ``writer(tmp_path)`` then rename onto ``path``."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".codec-probe-")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _atomic_text(path, text):
    _atomic(path, lambda tmp: open(tmp, "w", encoding="utf-8").write(text))


def _binning_from_args(args):
    return BinningConfig(
        pitch_bins=getattr(args, "pitch_bins", 64),
        loudness_bins=getattr(args, "loudness_bins", 32),
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args):
    corpus = load_corpus(args.corpus)
    frames = sum(align_streams(u).length for u in corpus)
    print(
        f"ok: {len(corpus)} utterances, {corpus.num_scales} scales, "
        f"{len(corpus.speaker_ids())} speakers, {frames} aligned frames"
    )
    return 0


def cmd_synth(args):
    if args.preset:
        spec = PRESETS[args.preset](seed=args.seed)
    else:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = synth.GroundTruthSpec.from_json(fh.read())
        if args.seed_given:
            spec.seed = args.seed
    corpus, truth = synth.generate_corpus(spec, args.n)
    _atomic(args.out, lambda tmp: write_corpus(corpus, tmp))
    if args.ground_truth:
        _atomic_text(args.ground_truth, truth.to_json())
    print(f"wrote {len(corpus)} utterances to {args.out}")
    return 0


def cmd_assoc(args):
    corpus = load_corpus(args.corpus)
    matrix = assoc.accumulate_cooccurrence(corpus, args.scale, threads=args.threads)
    _atomic(args.out, lambda tmp: assoc.write_cooccurrence_csv(matrix, tmp))
    print(f"scale {args.scale}: {matrix.total} frames, {int((matrix.counts.sum(axis=0) > 0).sum())} used codec tokens")
    return 0


def cmd_topk(args):
    corpus = load_corpus(args.corpus)
    matrix = assoc.accumulate_cooccurrence(corpus, args.scale, threads=args.threads)
    ranking = assoc.rank_associations(matrix)
    curve = assoc.topk_usage_curve(ranking, args.k_max, weighted=args.weighted)
    _atomic(args.out, lambda tmp: assoc.write_topk_csv(curve, tmp))
    print(f"scale {args.scale}: top-1 mean share {curve[0]:.2f}%")
    return 0


def _tsne_config(args, n_points):
    perplexity = args.perplexity
    if perplexity is None:
        perplexity = min(30.0, max(1.0, (n_points - 1) / 3.0))
    return projection.TsneConfig(
        perplexity=perplexity,
        iterations=args.iterations,
        seed=args.seed,
        mode=args.mode.replace("-", "_"),
        theta=args.theta,
    )


def cmd_tsne(args):
    categories = projection.load_category_file(args.categories) if args.categories else None
    if args.per_utterance:
        if not args.corpus:
            raise ValueError("--per-utterance requires --corpus")
        corpus = load_corpus(args.corpus)
        tables = read_codebooks(args.codebook)
        if args.scale >= len(tables):
            raise ValueError(f"scale out of range: {args.scale} with {len(tables)} codebooks")
        means, speakers = projection.utterance_mean_embeddings(corpus, tables[args.scale], args.scale)
        emb = projection.tsne(means, _tsne_config(args, means.shape[0]))
        rows = [
            projection.LabeledPoint(u.id, float(x), float(y), spk, "")
            for u, (x, y), spk in zip(corpus, emb.coords, speakers)
        ]
    else:
        tables = read_codebooks(args.codebook)
        if args.scale >= len(tables):
            raise ValueError(f"scale out of range: {args.scale} with {len(tables)} codebooks")
        table = tables[args.scale]
        emb = projection.tsne(table, _tsne_config(args, table.shape[0]))
        mapping = {}
        if args.corpus:
            corpus = load_corpus(args.corpus)
            ranking = assoc.rank_associations(assoc.accumulate_cooccurrence(corpus, args.scale))
            mapping = assoc.predominant_mapping(ranking)
        rows = projection.color_by_mapping(emb.coords, mapping, categories)

    os.makedirs(args.out_dir, exist_ok=True)
    _atomic(os.path.join(args.out_dir, "points.csv"), lambda tmp: projection.write_points_csv(rows, tmp))
    _atomic(
        os.path.join(args.out_dir, "layout.svg"),
        lambda tmp: projection.write_scatter_svg(rows, tmp, title=f"scale {args.scale}"),
    )
    _atomic(os.path.join(args.out_dir, "trace.csv"), lambda tmp: projection.write_trace_csv(emb.trace, tmp))
    print(f"final KL {emb.kl:.4f}; wrote points.csv, layout.svg, trace.csv to {args.out_dir}")
    return 0


def cmd_mi(args):
    corpus = load_corpus(args.corpus)
    cells = mi.mi_report(
        corpus,
        epochs=args.epochs,
        seed=args.seed,
        max_samples=args.max_samples,
        threads=args.threads,
    )
    _atomic(args.out, lambda tmp: mi.write_mi_csv(cells, tmp))
    for c in cells:
        log.info("mi scale=%d attr=%s %s=%.4f", c.scale, c.attribute, c.estimator, c.nats)
    print(f"wrote {len(cells)} MI cells to {args.out}")
    return 0


def cmd_train(args):
    corpus = load_corpus(args.corpus)
    binning = _binning_from_args(args)
    model_config = ancogen.ModelConfig(
        dim=args.dim,
        heads=args.heads,
        encoder_blocks=args.enc_blocks,
        decoder_blocks=args.dec_blocks,
    )
    train_config = ancogen.TrainConfig(
        steps=args.steps, batch_size=args.batch, lr=args.lr, seed=args.seed
    )
    model, losses = ancogen.train_model(corpus, binning, model_config, train_config)
    directory = os.path.dirname(os.path.abspath(args.out)) or "."
    tmpdir = tempfile.mkdtemp(dir=directory, prefix=".codec-probe-")
    try:
        staged = os.path.join(tmpdir, "model")
        ancogen.save_model(model, staged, binning, corpus.speaker_ids())
        os.replace(staged, args.out)
        os.replace(ancogen.sidecar_path(staged), ancogen.sidecar_path(args.out))
    finally:
        shutil.rmtree(tmpdir, ignore_errors=True)
    print(
        f"trained {model.num_params} parameters for {len(losses)} steps; "
        f"loss {losses[0]:.3f} -> {losses[-1]:.3f}; wrote {args.out}"
    )
    return 0


def _predicted_attrs_to_streams(pred, binning, rate, speaker_ids, content_cardinality):
    sid = speaker_ids[pred.speaker] if speaker_ids and pred.speaker < len(speaker_ids) else f"spk#{pred.speaker}"
    return AttributeStreams(
        content_tokens=pred.content,
        content_rate_hz=rate,
        content_cardinality=content_cardinality,
        pitch_hz=binning.pitch_bin_center_hz(pred.pitch),
        pitch_rate_hz=rate,
        loudness_db=binning.loudness_bin_center_db(pred.loudness),
        loudness_rate_hz=rate,
        speaker_id=sid,
        speaker_embedding=None,
    )


def _run_model_over_corpus(args, transform):
    model, binning, speaker_ids = ancogen.load_model(args.model)
    corpus = load_corpus(args.corpus)
    out = []
    for u in corpus:
        aligned = align_streams(u)
        out.append(transform(model, binning, speaker_ids, u, aligned))
    _atomic(args.out, lambda tmp: write_corpus(TokenCorpus(out), tmp))
    print(f"wrote {len(out)} utterances to {args.out}")
    return 0


def cmd_analyze(args):
    def transform(model, binning, speaker_ids, u, aligned):
        pred = ancogen.analyze(model, aligned.codec_tokens)
        attrs = _predicted_attrs_to_streams(
            pred, binning, aligned.frame_rate_hz, speaker_ids, model.layout.content_cardinality
        )
        codec = CodecStream(
            name=u.codec.name,
            frame_rate_hz=aligned.frame_rate_hz,
            num_scales=model.layout.num_scales,
            cardinality=u.codec.cardinality,
            tokens=aligned.codec_tokens,
        )
        return Utterance(id=u.id, codec=codec, attributes=attrs)

    return _run_model_over_corpus(args, transform)


def cmd_generate(args):
    def transform(model, binning, speaker_ids, u, aligned):
        if speaker_ids and aligned.speaker_id in speaker_ids:
            spk_token = speaker_ids.index(aligned.speaker_id)
        else:
            raise ValueError(f"speaker {aligned.speaker_id!r} not in the model's speaker table")
        frames = quantize_attributes(aligned, binning, {aligned.speaker_id: spk_token})
        tokens = ancogen.StreamTokens.from_aligned(aligned, frames)
        codec_pred = ancogen.generate(model, tokens)
        codec = CodecStream(
            name=u.codec.name,
            frame_rate_hz=aligned.frame_rate_hz,
            num_scales=model.layout.num_scales,
            cardinality=model.layout.codec_cardinality,
            tokens=codec_pred,
        )
        attrs = AttributeStreams(
            content_tokens=aligned.content,
            content_rate_hz=aligned.frame_rate_hz,
            content_cardinality=u.attributes.content_cardinality,
            pitch_hz=aligned.pitch_hz,
            pitch_rate_hz=aligned.frame_rate_hz,
            loudness_db=aligned.loudness_db,
            loudness_rate_hz=aligned.frame_rate_hz,
            speaker_id=aligned.speaker_id,
            speaker_embedding=aligned.speaker_embedding,
        )
        return Utterance(id=u.id, codec=codec, attributes=attrs)

    return _run_model_over_corpus(args, transform)


def cmd_convert(args):
    def transform(model, binning, speaker_ids, u, aligned):
        if not speaker_ids or args.target_speaker not in speaker_ids:
            raise ValueError(f"unknown target speaker {args.target_speaker!r}")
        target_token = speaker_ids.index(args.target_speaker)
        codec_pred = ancogen.convert_voice(model, aligned.codec_tokens, target_token)
        codec = CodecStream(
            name=u.codec.name,
            frame_rate_hz=aligned.frame_rate_hz,
            num_scales=model.layout.num_scales,
            cardinality=model.layout.codec_cardinality,
            tokens=codec_pred,
        )
        attrs = AttributeStreams(
            content_tokens=aligned.content,
            content_rate_hz=aligned.frame_rate_hz,
            content_cardinality=u.attributes.content_cardinality,
            pitch_hz=aligned.pitch_hz,
            pitch_rate_hz=aligned.frame_rate_hz,
            loudness_db=aligned.loudness_db,
            loudness_rate_hz=aligned.frame_rate_hz,
            speaker_id=args.target_speaker,
            speaker_embedding=None,
        )
        return Utterance(id=u.id, codec=codec, attributes=attrs)

    return _run_model_over_corpus(args, transform)


def cmd_report(args):
    corpus = load_corpus(args.corpus)
    m = corpus.num_scales
    artifacts = {}  # relative name -> writer
    tables = read_codebooks(args.codebook) if args.codebook else []

    for scale in range(m):
        matrix = assoc.accumulate_cooccurrence(corpus, scale, threads=args.threads)
        ranking = assoc.rank_associations(matrix)
        curve = assoc.topk_usage_curve(ranking, args.k_max)
        artifacts[f"topk_scale{scale}.csv"] = (
            lambda tmp, c=curve: assoc.write_topk_csv(c, tmp)
        )
        if args.codebook:
            if scale < len(tables):
                table = tables[scale]
                cfg = projection.TsneConfig(
                    perplexity=min(30.0, max(1.0, (table.shape[0] - 1) / 3.0)),
                    iterations=args.iterations,
                    seed=args.seed,
                )
                emb = projection.tsne(table, cfg)
                rows = projection.color_by_mapping(emb.coords, assoc.predominant_mapping(ranking))
                artifacts[f"tsne_scale{scale}_points.csv"] = (
                    lambda tmp, r=rows: projection.write_points_csv(r, tmp)
                )
                artifacts[f"tsne_scale{scale}_layout.svg"] = (
                    lambda tmp, r=rows, s=scale: projection.write_scatter_svg(r, tmp, title=f"scale {s}")
                )
                artifacts[f"tsne_scale{scale}_trace.csv"] = (
                    lambda tmp, t=emb.trace: projection.write_trace_csv(t, tmp)
                )

    cells = mi.mi_report(
        corpus, epochs=args.epochs, seed=args.seed, max_samples=args.max_samples, threads=args.threads
    )
    artifacts["mi_report.csv"] = lambda tmp: mi.write_mi_csv(cells, tmp)

    if args.model:
        model, binning, speaker_ids = ancogen.load_model(args.model)
        reports = _analysis_metrics(model, binning, speaker_ids, corpus)
        artifacts["metrics.csv"] = lambda tmp: metrics.write_metrics_csv(reports, tmp)

    os.makedirs(args.out_dir, exist_ok=True)
    for name, writer in artifacts.items():
        _atomic(os.path.join(args.out_dir, name), writer)
    print(f"wrote {len(artifacts)} report files to {args.out_dir}")
    return 0


def _analysis_metrics(model, binning, speaker_ids, corpus):
    content_pred, content_ref = [], []
    pitch_pred, pitch_ref = [], []
    speaker_hits, speaker_total = 0, 0
    for u in corpus:
        aligned = align_streams(u)
        pred = ancogen.analyze(model, aligned.codec_tokens)
        content_pred.append(pred.content)
        content_ref.append(aligned.content)
        pitch_pred.append(binning.pitch_bin_center_hz(pred.pitch))
        pitch_ref.append(aligned.pitch_hz)
        if speaker_ids and aligned.speaker_id in speaker_ids:
            speaker_total += 1
            speaker_hits += int(pred.speaker == speaker_ids.index(aligned.speaker_id))
    reports = [
        metrics.content_accuracy(np.concatenate(content_pred), np.concatenate(content_ref)),
        metrics.aae(np.concatenate(pitch_pred), np.concatenate(pitch_ref)),
    ]
    if speaker_total:
        reports.append(
            metrics.MetricReport("speaker_accuracy", speaker_hits / speaker_total, speaker_total, "fraction")
        )
    return reports


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="codec-probe",
        description="Probe how speech attributes are encoded in codec token streams.",
    )
    parser.add_argument("--seed", type=int, default=42, help="global random seed (default 42)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for corpus statistics and MI cells")
    parser.add_argument("--deterministic", action="store_true",
                        help="force fixed-order reductions (single-threaded execution)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a corpus file and print a summary")
    p.add_argument("--corpus", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("synth", help="generate a synthetic corpus with ground truth")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="GroundTruthSpec JSON file")
    g.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--n", type=int, required=True, help="number of utterances")
    p.add_argument("--out", required=True)
    p.add_argument("--ground-truth", help="also write ground_truth.json here")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("assoc", help="export the co-occurrence matrix for one scale")
    p.add_argument("--corpus", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_assoc)

    p = sub.add_parser("topk", help="export the top-k usage curve for one scale")
    p.add_argument("--corpus", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--k-max", type=int, default=20)
    p.add_argument("--weighted", action="store_true", help="weight codec tokens by frame support")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_topk)

    p = sub.add_parser("tsne", help="project codebook vectors (or utterance means) to 2-D")
    p.add_argument("--codebook", required=True, help="CBK1 codebook file")
    p.add_argument("--scale", type=int, default=0)
    p.add_argument("--corpus", help="corpus for predominant-token coloring / utterance means")
    p.add_argument("--categories", help="attr_token,category CSV for coloring")
    p.add_argument("--per-utterance", action="store_true",
                   help="project per-utterance mean embeddings colored by speaker")
    p.add_argument("--perplexity", type=float, default=None)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--mode", choices=["exact", "barnes-hut"], default="exact")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_tsne)

    p = sub.add_parser("mi", help="mutual information between scales and attributes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--max-samples", type=int, default=20000)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_mi)

    p = sub.add_parser("train", help="train the masked token transformer")
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--enc-blocks", type=int, default=2)
    p.add_argument("--dec-blocks", type=int, default=2)
    p.add_argument("--pitch-bins", type=int, default=64)
    p.add_argument("--loudness-bins", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("analyze", help="predict attribute streams from codec tokens")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("generate", help="predict codec tokens from attribute streams")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("convert", help="voice conversion: swap the speaker token and regenerate")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--target-speaker", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("report", help="bundle top-k curves, t-SNE plots and the MI table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--codebook")
    p.add_argument("--model")
    p.add_argument("--k-max", type=int, default=20)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--max-samples", type=int, default=10000)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1

    level = os.environ.get("CODEC_PROBE_LOG", "info").lower()
    logging.basicConfig(
        stream=sys.stderr,
        level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}.get(level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    raw = list(argv) if argv is not None else sys.argv[1:]
    args.seed_given = "--seed" in raw
    if args.deterministic:
        args.threads = 1
    log.info("resolved config: %s", {k: v for k, v in sorted(vars(args).items()) if k != "fn"})

    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ArithmeticError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
