"""
Command-line surface. Every subcommand maps onto one library operation.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
import argparse
import json
import logging
import os
import sys
import traceback
from typing import Dict, List, Optional, Sequence

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

SUBCOMMANDS = ('train-classifier', 'train-generator', 'generate', 'filter', 'evaluate', 'discriminate',
               'pipeline', 'sweep', 'make-toy')


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors to ``main`` instead of exiting with status 2."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault('allow_abbrev', False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def setup_django() -> None:
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'nligen_project.settings')
    from django.apps import apps
    if not apps.ready:
        import django
        django.setup()


def _float_list(text: str) -> List[float]:
    try:
        return [float(value) for value in text.split(',') if value.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _int_list(text: str) -> List[int]:
    try:
        return [int(value) for value in text.split(',') if value.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _add_config(parser: argparse.ArgumentParser, defaults: Dict) -> None:
    parser.add_argument('--config', help="JSON run configuration; flags override its values")
    parser.add_argument('--seed', type=int, help=f"run seed (default: {defaults['SEED']})")


def _add_training(parser: argparse.ArgumentParser, defaults: Dict, generator: bool = True,
                  classifier: bool = True) -> None:
    parser.add_argument('--hidden-dim', type=int, help=f"hidden size d (default: {defaults['HIDDEN_DIM']})")
    parser.add_argument('--embedding-dim', type=int,
                        help=f"word vector size (default: {defaults['EMBEDDING_DIM']})")
    parser.add_argument('--batch-size', type=int, help=f"batch size (default: {defaults['BATCH_SIZE']})")
    parser.add_argument('--learning-rate', type=float,
                        help=f"Adam learning rate (default: {defaults['LEARNING_RATE']})")
    parser.add_argument('--embeddings', help="GloVe-style embedding file (default: random N(0, 0.1) vectors)")
    parser.add_argument('--checkpoint-dtype', choices=('f32', 'f64'),
                        help=f"checkpoint value type (default: {defaults['CHECKPOINT_DTYPE']})")
    if generator:
        parser.add_argument('--latent-dim', type=int, help=f"latent size z (default: {defaults['LATENT_DIM']})")
        parser.add_argument('--epochs', type=int,
                            help=f"generator epochs (default: {defaults['GENERATOR_EPOCHS']})")
    if classifier:
        parser.add_argument('--max-epochs', type=int,
                            help=f"classifier epoch limit (default: {defaults['CLASSIFIER_MAX_EPOCHS']})")
        parser.add_argument('--patience', type=int,
                            help=f"early-stopping patience (default: {defaults['PATIENCE']})")


def _add_generation(parser: argparse.ArgumentParser, defaults: Dict, oversample_default) -> None:
    parser.add_argument('--beam', type=int, help=f"beam size k (default: {defaults['BEAM_SIZE']})")
    parser.add_argument('--oversample', type=float,
                        help=f"generation passes over the source, rounded up (default: {oversample_default})")
    parser.add_argument('--scalar-sigma', action='store_true', default=None,
                        help="sample latents with one shared sigma instead of per-dimension values")
    parser.add_argument('--workers', type=int, help=f"parallel generation workers (default: {defaults['WORKERS']})")


def build_parser(defaults: Dict) -> argparse.ArgumentParser:
    kinds = ('att-embed', 'base-embed', 'encdec', 'vae-encdec')
    thresholds = ','.join(str(t) for t in defaults['THRESHOLDS'])
    parser = _Parser(prog='nligen', description="Generate, filter and evaluate NLI datasets.")
    sub = parser.add_subparsers(dest='command', metavar='COMMAND', parser_class=_Parser)
    sub.required = True

    p = sub.add_parser('train-classifier', help="train a classifier with early stopping")
    p.add_argument('--train', required=True, help="training JSONL")
    p.add_argument('--dev', required=True, help="development JSONL")
    p.add_argument('--vocab', help="vocabulary file (default: built from --train)")
    p.add_argument('--out', required=True, help="checkpoint to write")
    _add_config(p, defaults)
    _add_training(p, defaults, generator=False)

    p = sub.add_parser('train-generator', help="train a hypothesis generator")
    p.add_argument('--train', required=True, help="training JSONL")
    p.add_argument('--model', choices=kinds, help="generator kind (default: att-embed)")
    p.add_argument('--vocab', help="vocabulary file (default: built from --train)")
    p.add_argument('--out', required=True, help="checkpoint to write")
    _add_config(p, defaults)
    _add_training(p, defaults, classifier=False)

    p = sub.add_parser('generate', help="generate hypotheses for the premises and labels of a corpus")
    p.add_argument('--checkpoint', required=True, help="generator checkpoint")
    p.add_argument('--source', required=True, help="source JSONL (premises and labels)")
    p.add_argument('--out', required=True, help="generated JSONL to write")
    _add_config(p, defaults)
    _add_generation(p, defaults, 1.0)

    p = sub.add_parser('filter', help="keep generated examples the judge agrees with")
    p.add_argument('--dataset', required=True, help="generated JSONL")
    p.add_argument('--judge', required=True, help="judge classifier checkpoint")
    p.add_argument('--threshold', type=float, required=True, help="keep examples with judge probability above this")
    p.add_argument('--target-size', type=int, help="balance labels and trim to this many examples")
    p.add_argument('--out', required=True, help="filtered JSONL to write")

    p = sub.add_parser('evaluate', help="print a metric report of a dataset as JSON")
    p.add_argument('--dataset', required=True, help="dataset JSONL")
    p.add_argument('--judge', required=True, help="judge classifier checkpoint")
    p.add_argument('--reference', help="original JSONL the dataset was generated from")
    p.add_argument('--generator', help="generator checkpoint (adds mean token NLL of --reference)")
    p.add_argument('--discriminator', help="discriminator checkpoint (adds the error rate against --reference)")
    p.add_argument('--seed', type=int, help=f"seed for latent draws and pairing (default: {defaults['SEED']})")

    p = sub.add_parser('discriminate', help="train a discriminator on original vs generated hypotheses")
    p.add_argument('--original', required=True, help="original JSONL")
    p.add_argument('--generated', required=True, help="generated JSONL")
    p.add_argument('--vocab', help="vocabulary file shared by both sets (default: built from --original)")
    p.add_argument('--eval-original', help="held-out original JSONL for the error rate")
    p.add_argument('--eval-generated', help="held-out generated JSONL for the error rate")
    p.add_argument('--epochs', type=int,
                   help=f"discriminator epochs (default: {defaults['DISCRIMINATOR_EPOCHS']})")
    p.add_argument('--out', required=True, help="checkpoint to write")
    _add_config(p, defaults)
    _add_training(p, defaults, generator=False, classifier=False)

    for name, text in (('pipeline', "run the full generate-filter-retrain comparison"),
                       ('sweep', "compare att-embed generators across latent sizes")):
        p = sub.add_parser(name, help=text)
        p.add_argument('--train', required=True, help="original training JSONL")
        p.add_argument('--dev', required=True, help="original development JSONL")
        p.add_argument('--test', required=True, help="original test JSONL")
        p.add_argument('--out', required=True, help="run directory")
        if name == 'pipeline':
            p.add_argument('--model', choices=kinds, help="generator kind (default: att-embed)")
        else:
            p.add_argument('--latent-dims', type=_int_list, help="latent sizes (default: 2,4,8,16,32)")
        p.add_argument('--thresholds', type=_float_list, help=f"judge thresholds (default: {thresholds})")
        p.add_argument('--merge-threshold', type=float,
                       help=f"threshold of the merged-data classifier (default: {defaults['MERGE_THRESHOLD']})")
        p.add_argument('--lenient-size', action='store_true', default=None,
                       help="shrink filtered sets that cannot fill the original size instead of failing")
        _add_config(p, defaults)
        _add_training(p, defaults)
        _add_generation(p, defaults, defaults['OVERSAMPLE'])

    p = sub.add_parser('make-toy', help="write a rule-generated toy corpus")
    p.add_argument('--out', required=True, help="directory for train/dev/test JSONL")
    p.add_argument('--size', type=int, default=3000, help="number of examples (default: 3000)")
    p.add_argument('--seed', type=int, help=f"corpus seed (default: {defaults['SEED']})")
    return parser


def _overrides(args: argparse.Namespace) -> Dict:
    get = lambda name: getattr(args, name, None)
    seed = get('seed')
    return {
        'kind': get('model'),
        'embeddings': get('embeddings'),
        'checkpoint_dtype': get('checkpoint_dtype'),
        'latent_dims': get('latent_dims'),
        'train': {
            'hidden_dim': get('hidden_dim'),
            'latent_dim': get('latent_dim'),
            'embedding_dim': get('embedding_dim'),
            'batch_size': get('batch_size'),
            'generator_epochs': get('epochs') if args.command != 'discriminate' else None,
            'discriminator_epochs': get('epochs') if args.command == 'discriminate' else None,
            'classifier_max_epochs': get('max_epochs'),
            'patience': get('patience'),
            'learning_rate': get('learning_rate'),
            'seed': seed,
        },
        'filter': {
            'thresholds': get('thresholds'),
            'merge_threshold': get('merge_threshold'),
            'strict_size': False if get('lenient_size') else None,
        },
        'generation': {
            'beam_size': get('beam'),
            'oversample': get('oversample'),
            'scalar_sigma': get('scalar_sigma'),
            'workers': get('workers'),
            'seed': seed,
        },
    }


def _run_config(args: argparse.Namespace, extra: Optional[Dict] = None):
    from .pipeline import _deep_merge, load_config_file, resolve_run_config
    file_values = load_config_file(args.config) if getattr(args, 'config', None) else None
    overrides = _overrides(args)
    if extra:
        overrides = _deep_merge(overrides, extra)
    return resolve_run_config(file_values, overrides)


def _corpus_and_vocab(args, cfg):
    from .data import load_corpus, load_vocab
    vocab = load_vocab(args.vocab) if getattr(args, 'vocab', None) else None
    loaded = load_corpus(args.train, vocab, cfg.premise_len, cfg.hypothesis_len, name='train')
    return loaded.dataset, loaded.vocab


def _embeddings(cfg, vocab):
    from .data import load_embeddings, random_embeddings
    if cfg.embeddings:
        return load_embeddings(cfg.embeddings, vocab, cfg.seed, cfg.train.embedding_dim, cfg.unknown_embedding_std)
    return random_embeddings(vocab, cfg.seed, cfg.train.embedding_dim, cfg.unknown_embedding_std)


def cmd_train_classifier(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_dataset
    from .pipeline import train_classifier
    cfg = _run_config(args)
    train, vocab = _corpus_and_vocab(args, cfg)
    dev = load_dataset(args.dev, vocab, cfg.premise_len, cfg.hypothesis_len)
    model, history = train_classifier(train, dev, cfg.train, _embeddings(cfg, vocab), vocab)
    save_checkpoint(model, args.out, cfg.checkpoint_dtype)
    print(json.dumps(history.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train_generator(args) -> int:
    from .checkpoint import save_checkpoint
    from .pipeline import train_generator
    cfg = _run_config(args)
    train, vocab = _corpus_and_vocab(args, cfg)
    model, history = train_generator(train, cfg.train, cfg.kind, _embeddings(cfg, vocab), vocab)
    save_checkpoint(model, args.out, cfg.checkpoint_dtype)
    print(json.dumps(history.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_generate(args) -> int:
    from .checkpoint import load_checkpoint, model_vocab
    from .data import load_dataset, save_dataset
    from .pipeline import generate_dataset
    cfg = _run_config(args, {'generation': {'oversample': args.oversample or 1.0}})
    generator = load_checkpoint(args.checkpoint)
    vocab = model_vocab(generator)
    source = load_dataset(args.source, vocab, generator.premise_len, generator.hypothesis_len)
    generated = generate_dataset(generator, source, cfg.generation)
    save_dataset(generated, vocab, args.out)
    return EXIT_OK


def cmd_filter(args) -> int:
    from .checkpoint import load_checkpoint, model_vocab
    from .data import load_dataset, save_dataset
    from .pipeline import balance_and_trim, filter_dataset
    judge = load_checkpoint(args.judge)
    vocab = model_vocab(judge)
    dataset = load_dataset(args.dataset, vocab, judge.premise_len, judge.hypothesis_len)
    kept = filter_dataset(dataset, judge, args.threshold).dataset
    if args.target_size:
        kept = balance_and_trim(kept, args.target_size)
    save_dataset(kept, vocab, args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from django.conf import settings
    from .checkpoint import load_checkpoint, model_vocab
    from .data import load_dataset
    from .metrics import dataset_report, discriminator_error_rate, mean_token_nll
    seed = args.seed if args.seed is not None else settings.NLIGEN['SEED']
    judge = load_checkpoint(args.judge)
    vocab = model_vocab(judge)
    dataset = load_dataset(args.dataset, vocab, judge.premise_len, judge.hypothesis_len)
    reference = None
    if args.reference:
        reference = load_dataset(args.reference, vocab, judge.premise_len, judge.hypothesis_len)
    report = dataset_report(dataset.name, dataset, judge, references=reference, seed=seed)
    if args.generator:
        generator = load_checkpoint(args.generator, vocab)
        report.nll = mean_token_nll(generator, reference if reference is not None else dataset, seed)
    if args.discriminator:
        if reference is None:
            raise UsageError("--discriminator needs --reference")
        disc = load_checkpoint(args.discriminator, vocab)
        count = min(len(reference), len(dataset))
        report.disc_error_rate = discriminator_error_rate(disc, list(reference)[:count], list(dataset)[:count], seed)
    print(report.to_json())
    return EXIT_OK


def cmd_discriminate(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import load_corpus, load_dataset, load_vocab
    from .metrics import discriminator_error_rate
    from .pipeline import train_discriminator
    cfg = _run_config(args)
    vocab = load_vocab(args.vocab) if args.vocab else None
    loaded = load_corpus(args.original, vocab, cfg.premise_len, cfg.hypothesis_len, name='original')
    original, vocab = loaded.dataset, loaded.vocab
    generated = load_dataset(args.generated, vocab, cfg.premise_len, cfg.hypothesis_len)
    model, history = train_discriminator(original, generated, cfg.train, _embeddings(cfg, vocab), vocab)
    save_checkpoint(model, args.out, cfg.checkpoint_dtype)
    result = history.to_dict()
    if args.eval_original and args.eval_generated:
        held_orig = list(load_dataset(args.eval_original, vocab, cfg.premise_len, cfg.hypothesis_len))
        held_gen = list(load_dataset(args.eval_generated, vocab, cfg.premise_len, cfg.hypothesis_len))
        count = min(len(held_orig), len(held_gen))
        result['error_rate'] = discriminator_error_rate(model, held_orig[:count], held_gen[:count], cfg.seed)
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    from .metrics import render_table
    from .pipeline import TABLE_COLUMNS, run_full_pipeline
    cfg = _run_config(args)
    report = run_full_pipeline(args.train, args.dev, args.test, cfg, args.out)
    print(render_table(report['generator']['rows'], TABLE_COLUMNS))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .metrics import render_table
    from .pipeline import TABLE_COLUMNS, run_latent_sweep
    cfg = _run_config(args)
    report = run_latent_sweep(args.train, args.dev, args.test, cfg, args.out)
    rows = [row for section in report['generators'] for row in section['rows']]
    print(render_table(rows, TABLE_COLUMNS))
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from django.conf import settings
    from .toy import write_toy_splits
    seed = args.seed if args.seed is not None else settings.NLIGEN['SEED']
    for split, path in write_toy_splits(args.out, seed, args.size).items():
        print(f"{split}\t{path}")
    return EXIT_OK


COMMANDS = {
    'train-classifier': cmd_train_classifier,
    'train-generator': cmd_train_generator,
    'generate': cmd_generate,
    'filter': cmd_filter,
    'evaluate': cmd_evaluate,
    'discriminate': cmd_discriminate,
    'pipeline': cmd_pipeline,
    'sweep': cmd_sweep,
    'make-toy': cmd_make_toy,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_django()
    from django.conf import settings
    from .exceptions import ConfigError

    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser(settings.NLIGEN)
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if not e.code else EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        logger.error(f"{args.command}: {str(e)}")
        print(f"nligen {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {str(e)}")
        logger.error(traceback.format_exc())
        print(f"nligen {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
