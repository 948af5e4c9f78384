"""Command-line entry point.

Subcommands:
    generate-data   Simulate NASCAR or Bernoulli-Lorenz data with ground truth
    fit             Initialise and fit a model by Gibbs sampling or SVI
    evaluate        Score a fit against ground truth
    generate        Forward-simulate a fitted parameter file
    geweke-test     Joint-distribution check of the Gibbs sampler

Exit codes: 0 on success, 2 on invalid input, 1 on any other failure.
"""

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from joblib import Parallel, delayed
from pydantic import ValidationError as PydanticValidationError

from rslds.errors import RsldsError, ValidationError
from rslds.evaluation import (
    affine_alignment_error,
    calibration_error,
    duration_statistics,
    segmentation_accuracy,
)
from rslds.experiments import gen_lorenz, gen_nascar
from rslds.geweke import geweke_test
from rslds.gibbs import initialize_state, run_gibbs
from rslds.init import initialize_model
from rslds.model import (
    Dataset,
    EmissionFamily,
    LatentPath,
    VariantTag,
    default_hypers,
    parse_model_name,
    simulate,
)
from rslds.serialization import (
    load_params,
    read_csv,
    read_data,
    read_json,
    read_paths,
    save_params,
    write_csv,
    write_data,
    write_json,
    write_paths,
)
from rslds.settings import (
    FILES,
    ExperimentSpec,
    LorenzConfig,
    SamplerConfig,
    SviConfig,
    config,
)
from rslds.svi import VariationalState, fit_svi, init_local

logger = logging.getLogger(__name__)

MODEL_CHOICES = ['slds', 'rslds', 'rslds-s', 'rslds-ro', 'rslds-sticky', 'rarhmm', 'rarhmm-ro']


def parse_mask(text: str) -> tuple[int, int]:
    """``a:b`` -> (a, b), the half-open interval of hidden steps."""
    try:
        start, stop = (int(v) for v in text.split(':'))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f'mask must look like a:b, got {text!r}') from exc
    return start, stop


def _rows(arr: np.ndarray) -> list:
    return [[t] + [repr(float(v)) for v in row] for t, row in enumerate(arr)]


def write_rates(path: str, rho: np.ndarray):
    write_csv(path, ['t'] + [f'rho{n}' for n in range(rho.shape[1])], _rows(rho))


def read_rates(path: str) -> np.ndarray:
    _, rows = read_csv(path)
    return np.array([[float(v) for v in row[1:]] for row in rows])


# ============================================================================
# generate-data
# ============================================================================

def generate_data(spec: ExperimentSpec) -> str:
    """Write data.csv, truth.json and truth_paths.csv (plus rho.csv for Lorenz) into ``spec.out``."""
    rng = np.random.default_rng(spec.seed)
    out = spec.out
    if spec.generator == 'nascar':
        params, path, data = gen_nascar(rng, T=spec.T)
        data = Dataset.with_mask_intervals(data.y, spec.mask)
        save_params(os.path.join(out, FILES['truth_params']), params,
                    extra={'generator': 'nascar', 'mask': [list(m) for m in spec.mask]})
    elif spec.generator == 'lorenz-bernoulli':
        lorenz = gen_lorenz(rng, spec.T, spec.mask, LorenzConfig())
        path, data = lorenz.path, lorenz.data
        write_json(os.path.join(out, FILES['truth_params']),
                   {'generator': 'lorenz-bernoulli', 'emission_family': EmissionFamily.BERNOULLI.value,
                    'C': lorenz.C.tolist(), 'd': lorenz.d.tolist(), 'mask': [list(m) for m in spec.mask]})
        write_rates(os.path.join(out, FILES['rho']), lorenz.rho)
    else:
        raise ValidationError('generate-data supports the nascar and lorenz-bernoulli generators')
    write_data(os.path.join(out, FILES['data']), data)
    write_paths(os.path.join(out, FILES['truth_paths']), path)
    return out


# ============================================================================
# fit
# ============================================================================

def load_dataset(data_dir: str, family: Optional[str] = None) -> Dataset:
    """Read data.csv, taking the emission family from truth.json when not given."""
    if family is None:
        truth_path = os.path.join(data_dir, FILES['truth_params'])
        family = read_json(truth_path).get('emission_family', 'gaussian') if os.path.exists(truth_path) else 'gaussian'
    return read_data(os.path.join(data_dir, FILES['data']), EmissionFamily(family))


def fit_chain(spec: ExperimentSpec, data: Dataset, seed: np.random.SeedSequence, out: str) -> dict:
    """Initialise and fit one chain, writing every artifact into ``out``."""
    rng = np.random.default_rng(seed)
    variant, transitions = parse_model_name(spec.model)
    hypers = default_hypers(spec.K, spec.M, data.N, variant, transitions)
    init = initialize_model(data, spec.K, spec.M, variant, rng, transitions=transitions, hypers=hypers)
    write_json(os.path.join(out, FILES['init']), init.to_json_dict())

    if spec.inference == 'gibbs':
        sampler = SamplerConfig() if spec.iters is None else SamplerConfig(
            n_iters=spec.iters, burn_in=min(SamplerConfig().burn_in, spec.iters // 2))
        state = initialize_state(init.params, init.path, data, rng)
        result = run_gibbs(state, data, sampler, hypers, out_dir=out)
        params = result.state.params
        path = LatentPath(z=np.argmax(result.state_probs, axis=1), x=result.mean_x)
        rho = result.mean_rho
        summary = {'final_log_joint': result.log_joints[-1], 'n_kept': result.n_kept}
    else:
        svi = SviConfig() if spec.iters is None else SviConfig(n_iters=spec.iters)
        vs = VariationalState.from_params(init.params)
        local = init_local(init.params, init.path, data)
        result = fit_svi(vs, [data], [local], svi, hypers, rng, out_dir=out)
        params = result.state.mean_params()
        local = result.locals[0]
        path = LatentPath(z=np.argmax(local.qz.unary, axis=1), x=local.smoother.means)
        rho = None
        summary = {'final_elbo': result.elbos[-1]}

    save_params(os.path.join(out, FILES['params']), params)
    write_paths(os.path.join(out, FILES['paths']), path, data)
    if rho is not None:
        write_rates(os.path.join(out, FILES['rho']), rho)
    return summary


def fit(spec: ExperimentSpec, data: Dataset) -> str:
    """Run ``spec.chains`` independent chains; chain i uses the i-th spawned seed."""
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.chains)
    if spec.chains == 1:
        fit_chain(spec, data, seeds[0], spec.out)
        return spec.out
    outs = [os.path.join(spec.out, f'chain_{i}') for i in range(spec.chains)]
    Parallel(n_jobs=spec.chains)(delayed(fit_chain)(spec, data, s, o) for s, o in zip(seeds, outs))
    return spec.out


# ============================================================================
# evaluate / generate
# ============================================================================

def evaluate(run_dir: str, truth_dir: str, generated_dir: Optional[str] = None) -> dict:
    """Compare a fit's exports with ground truth and write metrics.json into ``run_dir``."""
    truth = read_paths(os.path.join(truth_dir, FILES['truth_paths']))
    est = read_paths(os.path.join(run_dir, FILES['paths']))
    if truth.T != est.T:
        raise ValidationError(f'truth has {truth.T} steps but the fit has {est.T}')
    data = load_dataset(truth_dir)
    observed = data.mask
    metrics = {
        'segmentation_accuracy': segmentation_accuracy(truth.z, est.z),
        'segmentation_accuracy_observed': segmentation_accuracy(truth.z, est.z, mask=observed),
        'affine_alignment_error': affine_alignment_error(truth.x, est.x),
        'durations_truth': duration_statistics(truth.z).to_json_dict(),
        'durations_fit': duration_statistics(est.z).to_json_dict(),
    }
    true_rho_path = os.path.join(truth_dir, FILES['rho'])
    est_rho_path = os.path.join(run_dir, FILES['rho'])
    if os.path.exists(true_rho_path) and os.path.exists(est_rho_path):
        rho_true, rho_est = read_rates(true_rho_path), read_rates(est_rho_path)
        metrics['calibration_error'] = calibration_error(rho_est, rho_true)
        if np.any(~observed):
            metrics['calibration_error_masked'] = calibration_error(rho_est, rho_true, mask=~observed)
            metrics['calibration_error_masked_first_output'] = calibration_error(
                rho_est[~observed, 0], rho_true[~observed, 0])
    if generated_dir is not None:
        generated = read_paths(os.path.join(generated_dir, FILES['paths']))
        stats = duration_statistics(generated.z)
        metrics['durations_generated'] = stats.to_json_dict()
        truth_cv = metrics['durations_truth']['cv']
        metrics['duration_cv_ratio'] = stats.cv / truth_cv if truth_cv > 0 else None
    write_json(os.path.join(run_dir, FILES['metrics']), metrics)
    return metrics


def generate(params_path: str, T: int, seed: int, out: str) -> str:
    params = load_params(params_path)
    latent, data = simulate(params, T, np.random.default_rng(seed))
    write_paths(os.path.join(out, FILES['paths']), latent, data)
    return out


# ============================================================================
# Argument parsing
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='rslds', description='Recurrent switching linear dynamical systems')
    sub = parser.add_subparsers(dest='command', required=True)
    default_out = os.environ.get('RSLDS_OUTPUT_DIR', config['settings']['output_dir'])

    def common(p, with_model=True):
        p.add_argument('--seed', type=int, default=config['settings']['seed'])
        p.add_argument('--out', default=default_out)
        if with_model:
            p.add_argument('--model', choices=MODEL_CHOICES, default=config['experiment']['model'])
            p.add_argument('--K', type=int, default=config['experiment']['K'])
            p.add_argument('--M', type=int, default=None)

    p = sub.add_parser('generate-data', help='simulate a synthetic dataset with ground truth')
    common(p, with_model=False)
    p.add_argument('--generator', choices=['nascar', 'lorenz-bernoulli'], default='nascar')
    p.add_argument('--T', type=int, default=config['experiment']['T'])
    p.add_argument('--mask', type=parse_mask, action='append', default=None)

    p = sub.add_parser('fit', help='fit a model to a dataset directory')
    common(p)
    p.add_argument('--data', required=True, help='directory holding data.csv')
    p.add_argument('--emissions', choices=[f.value for f in EmissionFamily], default=None)
    p.add_argument('--inference', choices=['gibbs', 'svi'], default=config['experiment']['inference'])
    p.add_argument('--iters', type=int, default=None)
    p.add_argument('--mask', type=parse_mask, action='append', default=None)
    p.add_argument('--chains', type=int, default=config['experiment']['chains'])
    p.add_argument('--T', type=int, default=None, help='use only the first T steps')

    p = sub.add_parser('evaluate', help='score a fit against ground truth')
    p.add_argument('--run', required=True)
    p.add_argument('--truth', required=True)
    p.add_argument('--generated', default=None)

    p = sub.add_parser('generate', help='forward-simulate a parameter file')
    common(p, with_model=False)
    p.add_argument('--params', required=True)
    p.add_argument('--T', type=int, default=config['experiment']['T'])

    p = sub.add_parser('geweke-test', help='joint-distribution check of the Gibbs sampler')
    common(p)
    p.add_argument('--N', type=int, default=2)
    p.add_argument('--T', type=int, default=20)
    p.add_argument('--iters', type=int, default=5000, help='samples per arm')
    p.add_argument('--thinning', type=int, default=1)
    p.add_argument('--threshold', type=float, default=0.05)
    return parser


def _fit_from_args(args) -> str:
    data = load_dataset(args.data, args.emissions)
    if args.T is not None:
        data = Dataset(y=data.y[:args.T], mask=data.mask[:args.T], emission_family=data.emission_family)
    variant, _ = parse_model_name(args.model)
    M = args.M if args.M is not None else (data.N if variant == VariantTag.RARHMM else config['experiment']['M'])
    mask = args.mask or []
    spec = ExperimentSpec(generator='from-model-file', T=data.T, seed=args.seed, mask=mask, model=args.model,
                          inference=args.inference, K=args.K, M=M, iters=args.iters, chains=args.chains,
                          data_dir=args.data, out=args.out)
    if mask:
        keep = Dataset.with_mask_intervals(data.y, mask).mask & data.mask
        data = Dataset(y=data.y, mask=keep, emission_family=data.emission_family)
    return fit(spec, data)


def run(args) -> int:
    if args.command == 'generate-data':
        if args.mask is not None:
            mask = args.mask
        elif args.generator == 'lorenz-bernoulli':
            mask = [tuple(m) for m in config['experiment']['mask'] if m[1] <= args.T]
        else:
            mask = []
        spec = ExperimentSpec(generator=args.generator, T=args.T, seed=args.seed, mask=mask, out=args.out)
        out = generate_data(spec)
    elif args.command == 'fit':
        out = _fit_from_args(args)
    elif args.command == 'evaluate':
        metrics = evaluate(args.run, args.truth, args.generated)
        out = args.run
        logger.info(f"Segmentation accuracy {metrics['segmentation_accuracy']:.3f}")
    elif args.command == 'generate':
        out = generate(args.params, args.T, args.seed, args.out)
    else:
        variant, transitions = parse_model_name(args.model)
        M = args.M or 1
        hypers = default_hypers(args.K, M, args.N, variant, transitions)
        result = geweke_test(hypers, args.K, M, args.N, args.T, args.iters, np.random.default_rng(args.seed),
                             variant=variant, transitions=transitions, thinning=args.thinning, progress=True)
        doc = result.to_json_dict()
        doc['threshold'] = args.threshold
        doc['passed'] = result.passed(args.threshold)
        write_json(os.path.join(args.out, FILES['metrics']), doc)
        if not doc['passed']:
            logger.error(f'❌ Geweke check failed: KS statistics {result.ks_statistics.round(4).tolist()}')
            return 1
        out = args.out
    logger.info(f'✅ {args.command} finished, outputs in {out}')
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=os.environ.get('RSLDS_LOG_LEVEL', config['settings']['log_level']).upper(),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        return run(args)
    except (ValidationError, PydanticValidationError) as exc:
        logger.error(f'❌ Invalid input: {exc}')
        return 2
    except RsldsError as exc:
        logger.error(f'❌ {type(exc).__name__}: {exc}')
        return 1
    except Exception as exc:
        logger.exception(f'❌ Unexpected failure: {exc}')
        return 1


if __name__ == '__main__':
    sys.exit(main())
