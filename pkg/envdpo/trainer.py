"""
The environment-invariant DPO training loop.

Per mini-batch: hidden representations are projected by the extractor,
clustered with DBSCAN into pseudo-environments, softly assigned to the cluster
centers, and the DPO loss is combined with lambda times the pairwise MMD between
the environments' soft-weighted policy outputs. Centers and the kernel bandwidth
are constants within a step; memberships stay differentiable.
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from envdpo.constants import INVARIANCE_WINDOW, PROBE_SIZE
from envdpo.divergence import MMD_FORMS, SQUARED, KernelConfig, SharedSupportMmd
from envdpo.environments import (
    DbscanConfig,
    ExtractorParams,
    SoftAssignment,
    aggregate_all,
    discover,
    env_prior,
    extract_batch,
    extractor_backward,
    init_extractor,
    soft_assign,
    soft_assign_backward,
)
from envdpo.errors import ConfigError, EmptyBatchError, InputError
from envdpo.model import (
    FAMILIES,
    LOG_LINEAR,
    FeatureSpec,
    PolicyParams,
    ReferencePolicy,
    freeze_reference,
    hidden_repr_batch,
    hidden_repr_backward,
    init_policy,
    log_prob_grad_batch,
    log_probs,
)
from envdpo.preference import DpoLoss, PreferenceBatch, preference_accuracy
from envdpo.utils import PathLike, read_json, substream, write_json, write_jsonl

SCORE = "score"
HIDDEN = "hidden"
MMD_TARGETS = (SCORE, HIDDEN)
DPO_METHOD = "dpo"
CAUSAL_METHOD = "causal-dpo"
ENV_SUMMARY_SIZE = 512


@dataclass
class TrainConfig:
    beta: float = 2.0
    lam: float = 1.0
    eta: float = 0.05
    extractor_eta: float = 0.2
    epochs: int = 3
    batch_size: int = 64
    iterations: int = 4
    warmup_steps: int = 300
    dbscan: Optional[DbscanConfig] = None
    kernel: KernelConfig = field(default_factory=KernelConfig)
    mmd_form: str = SQUARED
    mmd_target: str = SCORE
    distance_scale: float = 3.0
    extractor_dim: int = 1
    probe_size: int = PROBE_SIZE
    family: str = LOG_LINEAR
    hidden_dim: int = 8
    seed: int = 0
    dump_envs: bool = False

    def __post_init__(self):
        if isinstance(self.dbscan, dict):
            self.dbscan = DbscanConfig(**self.dbscan)
        if isinstance(self.kernel, dict):
            self.kernel = KernelConfig(**self.kernel)
        problems = []
        if not self.beta > 0:
            problems.append("beta must be positive")
        if self.lam < 0:
            problems.append("lambda must be nonnegative")
        if not self.eta > 0 or self.extractor_eta < 0:
            problems.append("learning rates must be positive")
        if self.epochs < 0 or self.iterations < 1 or self.warmup_steps < 0:
            problems.append("epochs/warmup_steps must be >= 0 and iterations >= 1")
        if self.batch_size < 2:
            problems.append("batch_size must be at least 2")
        if self.mmd_form not in MMD_FORMS:
            problems.append(f"mmd_form must be one of {MMD_FORMS}")
        if self.mmd_target not in MMD_TARGETS:
            problems.append(f"mmd_target must be one of {MMD_TARGETS}")
        if self.family not in FAMILIES:
            problems.append(f"family must be one of {FAMILIES}")
        if not self.distance_scale > 0 or self.extractor_dim < 1 or self.hidden_dim < 1:
            problems.append("distance_scale, extractor_dim and hidden_dim must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def method(self) -> str:
        return DPO_METHOD if self.lam == 0 else CAUSAL_METHOD

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["lambda"] = data.pop("lam")
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError(f"invalid training config: {err}") from err


@dataclass
class RunRecord:
    step: int
    iteration: int
    epoch: int
    dpo_loss: float
    mmd_penalty: Optional[float]
    total_loss: float
    k_discovered: int
    env_prior: List[float]
    w_E: List[float]
    probe_accuracy: Optional[float]
    kernel_evals: int
    degenerate: bool

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def invariance_ratio(
    records: Sequence[RunRecord], window: int = INVARIANCE_WINDOW
) -> Optional[float]:
    """Mean MMD penalty of the trailing window over that of the leading window.

    Windows shrink to half the run when it is shorter than two of them. None for
    runs without a penalty or with a zero leading mean.
    """
    penalties = [r.mmd_penalty for r in records if r.mmd_penalty is not None]
    if not penalties:
        return None
    window = min(window, max(1, len(penalties) // 2))
    leading = float(np.mean(penalties[:window]))
    trailing = float(np.mean(penalties[-window:]))
    return trailing / leading if leading > 0 else None


def _score_values(policy: PolicyParams, batch: PreferenceBatch) -> np.ndarray:
    lp = log_probs(policy, batch.env, batch.rest)
    return lp[np.arange(len(batch)), batch.y_w][:, None]


class StepObjective:
    """L_DPO + lambda * pairwise MMD with this batch's clustering frozen.

    Exposes value and analytic gradient over (policy, extractor) so the update
    and its finite-difference check evaluate the same function.
    """

    def __init__(
        self,
        batch: PreferenceBatch,
        reference: ReferencePolicy,
        cfg: TrainConfig,
        centers: np.ndarray,
        sigma: float,
        discovered: int,
    ):
        self.batch = batch
        self.reference = reference
        self.cfg = cfg
        self.centers = np.atleast_2d(centers)
        self.discovered = discovered
        self.loss_fn = DpoLoss(cfg.beta)
        self.mmd = SharedSupportMmd(sigma, cfg.mmd_form)

    @property
    def active(self) -> bool:
        """Whether the penalty has any pair to compare."""
        return self.discovered >= 2

    def _forward(self, policy: PolicyParams, extractor: ExtractorParams):
        h = hidden_repr_batch(policy, self.batch.env, self.batch.rest)
        z = extract_batch(extractor, h)
        assignment = soft_assign(z, self.centers, self.cfg.distance_scale)
        if not self.active:
            assignment = SoftAssignment(
                np.ones((len(z), 1)), self.centers[:1], assignment.noise_mask, 0
            )
        values = _score_values(policy, self.batch) if self.cfg.mmd_target == SCORE else z
        return h, z, assignment, values

    def value(
        self, policy: PolicyParams, extractor: ExtractorParams
    ) -> Tuple[float, float, float]:
        _, _, assignment, values = self._forward(policy, extractor)
        dpo = self.loss_fn.loss(self.batch, policy, self.reference)
        mmd = self.mmd.value(values, assignment.probs) if self.active else 0.0
        return dpo + self.cfg.lam * mmd, dpo, mmd

    def gradient(self, policy: PolicyParams, extractor: ExtractorParams):
        """(total, dpo, mmd, policy gradient, extractor gradient, assignment, evals)"""
        h, z, assignment, values = self._forward(policy, extractor)
        dpo, policy_grad, _ = self.loss_fn.loss_and_grad(self.batch, policy, self.reference)
        extractor_grad = ExtractorParams(
            np.zeros_like(extractor.W_g), np.zeros_like(extractor.b_g)
        )
        if not self.active:
            return dpo, dpo, 0.0, policy_grad, extractor_grad, assignment, 0

        penalty = self.mmd.evaluate(values, assignment.probs, with_grad=self.cfg.lam > 0)
        total = dpo + self.cfg.lam * penalty.value
        if self.cfg.lam == 0:
            return (
                total,
                dpo,
                penalty.value,
                policy_grad,
                extractor_grad,
                assignment,
                penalty.kernel_evals,
            )

        lam = self.cfg.lam
        grad_z = soft_assign_backward(z, assignment, penalty.grad_weights)
        mmd_policy_grad = policy.zeros_like()
        if self.cfg.mmd_target == SCORE:
            mmd_policy_grad = log_prob_grad_batch(
                policy,
                self.batch.env,
                self.batch.rest,
                self.batch.y_w,
                weights=penalty.grad_values[:, 0],
            )
        else:
            grad_z = grad_z + penalty.grad_values
        g_extractor, grad_h = extractor_backward(extractor, h, grad_z)
        mmd_policy_grad = mmd_policy_grad.plus(
            hidden_repr_backward(policy, self.batch.env, self.batch.rest, grad_h)
        )
        policy_grad = policy_grad.plus(mmd_policy_grad, lam)
        extractor_grad = ExtractorParams(lam * g_extractor.W_g, lam * g_extractor.b_g)
        return (
            total,
            dpo,
            penalty.value,
            policy_grad,
            extractor_grad,
            assignment,
            penalty.kernel_evals,
        )


def discover_batch_envs(
    batch: PreferenceBatch,
    policy: PolicyParams,
    extractor: ExtractorParams,
    cfg: TrainConfig,
) -> Tuple[SoftAssignment, np.ndarray]:
    """Hidden reprs -> extract -> DBSCAN -> centers -> soft assignment."""
    h = hidden_repr_batch(policy, batch.env, batch.rest)
    z = extract_batch(extractor, h)
    assignment, _ = discover(z, cfg.dbscan, cfg.distance_scale)
    assignment.check_rows()
    return assignment, z


def _bandwidth(
    batch: PreferenceBatch, policy: PolicyParams, z: np.ndarray, cfg: TrainConfig
) -> float:
    values = _score_values(policy, batch) if cfg.mmd_target == SCORE else z
    return cfg.kernel.sigma_for(values)


def causal_dpo_loss(
    batch: PreferenceBatch,
    policy: PolicyParams,
    reference: ReferencePolicy,
    envstate: SoftAssignment,
    cfg: TrainConfig,
    extractor: Optional[ExtractorParams] = None,
) -> Tuple[float, float, float]:
    """(total, dpo part, mmd part) for memberships already computed on this batch."""
    if len(batch) == 0:
        raise EmptyBatchError("preference batch is empty")
    dpo = DpoLoss(cfg.beta).loss(batch, policy, reference)
    if envstate.k <= 1:
        return dpo, dpo, 0.0
    if cfg.mmd_target == SCORE:
        values = _score_values(policy, batch)
    else:
        if extractor is None:
            raise ConfigError("hidden-embedding MMD needs the extractor")
        values = extract_batch(extractor, hidden_repr_batch(policy, batch.env, batch.rest))
    mmd = SharedSupportMmd(cfg.kernel.sigma_for(values), cfg.mmd_form).value(
        values, envstate.probs
    )
    return dpo + cfg.lam * mmd, dpo, mmd


def _w_E(policy: PolicyParams) -> List[float]:
    return [float(w) for w in policy.w_E]


def train_step(
    batch: PreferenceBatch,
    policy: PolicyParams,
    reference: ReferencePolicy,
    extractor: ExtractorParams,
    cfg: TrainConfig,
    step: int = 0,
    iteration: int = 0,
    epoch: int = 0,
    probe: Optional[PreferenceBatch] = None,
) -> Tuple[PolicyParams, ExtractorParams, RunRecord, SoftAssignment]:
    if len(batch) < 2:
        raise ConfigError("a training step needs at least two triples")
    assignment, z = discover_batch_envs(batch, policy, extractor, cfg)
    objective = StepObjective(
        batch,
        reference,
        cfg,
        assignment.centers,
        _bandwidth(batch, policy, z, cfg),
        assignment.discovered,
    )
    total, dpo, mmd, policy_grad, extractor_grad, _, evals = objective.gradient(
        policy, extractor
    )
    prior = env_prior(assignment)
    new_policy = policy.plus(policy_grad, -cfg.eta)
    new_extractor = extractor
    if cfg.lam > 0 and objective.active:
        new_extractor = ExtractorParams(
            extractor.W_g - cfg.extractor_eta * extractor_grad.W_g,
            extractor.b_g - cfg.extractor_eta * extractor_grad.b_g,
        )
    record = RunRecord(
        step=step,
        iteration=iteration,
        epoch=epoch,
        dpo_loss=dpo,
        mmd_penalty=mmd,
        total_loss=total,
        k_discovered=assignment.discovered,
        env_prior=prior.p_hat.tolist(),
        w_E=_w_E(policy),
        probe_accuracy=None if probe is None else preference_accuracy(probe, policy),
        kernel_evals=evals,
        degenerate=not objective.active,
    )
    return new_policy, new_extractor, record, assignment


def dpo_step(
    batch: PreferenceBatch,
    policy: PolicyParams,
    reference: ReferencePolicy,
    extractor: ExtractorParams,
    cfg: TrainConfig,
    step: int = 0,
    iteration: int = 0,
    epoch: int = 0,
    probe: Optional[PreferenceBatch] = None,
) -> Tuple[PolicyParams, ExtractorParams, RunRecord, Optional[SoftAssignment]]:
    """Plain DPO update with no environment discovery at all."""
    loss, grad, _ = DpoLoss(cfg.beta).loss_and_grad(batch, policy, reference)
    record = RunRecord(
        step=step,
        iteration=iteration,
        epoch=epoch,
        dpo_loss=loss,
        mmd_penalty=None,
        total_loss=loss,
        k_discovered=0,
        env_prior=[],
        w_E=_w_E(policy),
        probe_accuracy=None if probe is None else preference_accuracy(probe, policy),
        kernel_evals=0,
        degenerate=True,
    )
    return policy.plus(grad, -cfg.eta), extractor, record, None


def warm_start(
    dataset: PreferenceBatch, policy: PolicyParams, cfg: TrainConfig
) -> PolicyParams:
    """Supervised steps maximizing mean log pi(y_w | x) before the first freeze."""
    n = len(dataset)
    for step in range(cfg.warmup_steps):
        idx = substream(cfg.seed, "warmup", step).choice(
            n, size=min(cfg.batch_size, n), replace=False
        )
        part = dataset.subset(np.sort(idx))
        grad = log_prob_grad_batch(
            policy, part.env, part.rest, part.y_w, weights=np.full(len(part), 1.0 / len(part))
        )
        policy = policy.plus(grad, cfg.eta)
    if cfg.warmup_steps:
        logger.info(f"Warm start finished after {cfg.warmup_steps} steps")
    return policy


def split_probe(
    dataset: PreferenceBatch, cfg: TrainConfig
) -> Tuple[PreferenceBatch, Optional[PreferenceBatch]]:
    n_probe = min(cfg.probe_size, len(dataset) // 4)
    order = substream(cfg.seed, "probe").permutation(len(dataset))
    if n_probe == 0:
        return dataset, None
    return dataset.subset(np.sort(order[n_probe:])), dataset.subset(np.sort(order[:n_probe]))


def epoch_batches(n: int, cfg: TrainConfig, iteration: int, epoch: int) -> List[np.ndarray]:
    order = substream(cfg.seed, "shuffle", iteration, epoch).permutation(n)
    chunks = [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
    return [np.sort(chunk) for chunk in chunks if len(chunk) >= 2]


def env_summary(
    dataset: PreferenceBatch,
    policy: PolicyParams,
    extractor: ExtractorParams,
    cfg: TrainConfig,
) -> Dict[str, Any]:
    """Prior and aggregated environment-feature centroids for backdoor ranking."""
    order = substream(cfg.seed, "summary").permutation(len(dataset))
    sample = dataset.subset(np.sort(order[:ENV_SUMMARY_SIZE]))
    assignment, _ = discover_batch_envs(sample, policy, extractor, cfg)
    return {
        "discovered": assignment.discovered,
        "prior": env_prior(assignment).p_hat.tolist(),
        "env_centroids": aggregate_all(sample.env, assignment).tolist(),
    }


@dataclass
class TrainState:
    policy: PolicyParams
    extractor: ExtractorParams
    reference: Optional[ReferencePolicy]
    step: int = 0
    iteration: int = 0
    epoch: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "policy": self.policy.to_dict(),
            "extractor": self.extractor.to_dict(),
            "reference": None if self.reference is None else self.reference.params.to_dict(),
            "step": self.step,
            "iteration": self.iteration,
            "epoch": self.epoch,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainState":
        reference = data.get("reference")
        return cls(
            policy=PolicyParams.from_dict(data["policy"]),
            extractor=ExtractorParams.from_dict(data["extractor"]),
            reference=None
            if reference is None
            else freeze_reference(PolicyParams.from_dict(reference)),
            step=int(data["step"]),
            iteration=int(data["iteration"]),
            epoch=int(data["epoch"]),
        )


class RunWriter:
    """records.jsonl, per-epoch checkpoints, envs.jsonl and summary.json of a run."""

    def __init__(self, outdir: PathLike, resume: bool = False):
        self.outdir = Path(outdir)
        self.ckpt_dir = self.outdir / "checkpoints"
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.records_path = self.outdir / "records.jsonl"
        self.envs_path = self.outdir / "envs.jsonl"
        if not resume:
            for path in (self.records_path, self.envs_path):
                path.unlink(missing_ok=True)

    @property
    def latest(self) -> Path:
        return self.ckpt_dir / "latest.json"

    def record(self, record: RunRecord) -> None:
        write_jsonl([record.to_dict()], self.records_path, append=True)

    def envs(self, assignment: SoftAssignment, step: int) -> None:
        write_jsonl([assignment.to_record(step)], self.envs_path, append=True)

    def checkpoint(self, state: TrainState) -> None:
        data = state.to_dict()
        write_json(data, self.ckpt_dir / f"iter{state.iteration}_epoch{state.epoch}.json")
        write_json(data, self.latest)

    def load_latest(self) -> Optional[TrainState]:
        if not self.latest.is_file():
            return None
        return TrainState.from_dict(read_json(self.latest))

    def summary(self, summary: Dict[str, Any]) -> None:
        write_json(summary, self.outdir / "summary.json")


@dataclass
class TrainResult:
    policy: PolicyParams
    extractor: ExtractorParams
    records: List[RunRecord]
    env_summary: Optional[Dict[str, Any]] = None
    reference_fingerprints: List[str] = field(default_factory=list)

    def summary(self, cfg: TrainConfig, plain: bool = False) -> Dict[str, Any]:
        last = self.records[-1] if self.records else None
        return {
            "method": DPO_METHOD if plain else cfg.method,
            "config": cfg.to_dict(),
            "steps": len(self.records),
            "final_dpo_loss": None if last is None else last.dpo_loss,
            "final_mmd_penalty": None if last is None else last.mmd_penalty,
            "final_probe_accuracy": None if last is None else last.probe_accuracy,
            "final_w_E": _w_E(self.policy),
            "invariance_ratio": invariance_ratio(self.records),
            "env_summary": self.env_summary,
            "reference_fingerprints": self.reference_fingerprints,
        }


def train(
    dataset: PreferenceBatch,
    spec: FeatureSpec,
    cfg: TrainConfig,
    writer: Optional[RunWriter] = None,
    resume: bool = False,
    plain: bool = False,
) -> TrainResult:
    """Warm start, then `iterations` rounds of `epochs` passes, re-freezing the
    reference at the start of every round.

    `plain` swaps in the dedicated DPO step; with lambda = 0 both paths produce
    the same parameters.
    """
    if len(dataset) == 0:
        raise InputError("training dataset is empty")
    dataset.check(spec)
    policy = init_policy(spec, cfg.family, cfg.seed, cfg.hidden_dim)
    in_dim = spec.input_dim if cfg.family == LOG_LINEAR else cfg.hidden_dim
    extractor = init_extractor(in_dim, cfg.extractor_dim, cfg.seed)
    if cfg.epochs == 0:
        return TrainResult(policy, extractor, [])

    train_set, probe = split_probe(dataset, cfg)
    step_fn: Callable = dpo_step if plain else train_step
    state = writer.load_latest() if (writer is not None and resume) else None
    if state is None:
        policy = warm_start(train_set, policy, cfg)
        state = TrainState(policy, extractor, None, step=0, iteration=0, epoch=-1)
    else:
        logger.info(
            f"Resuming after iteration {state.iteration} epoch {state.epoch} "
            f"(step {state.step})"
        )

    fingerprint_env, fingerprint_rest = train_set.env[:64], train_set.rest[:64]
    fingerprints: List[str] = []
    records: List[RunRecord] = []
    policy, extractor, step = state.policy, state.extractor, state.step
    start_iteration, start_epoch = state.iteration, state.epoch + 1
    if start_epoch >= cfg.epochs:
        start_iteration, start_epoch = start_iteration + 1, 0

    for iteration in range(start_iteration, cfg.iterations):
        if iteration == start_iteration and start_epoch > 0 and state.reference is not None:
            reference = state.reference
        else:
            reference = freeze_reference(policy)
        fingerprints.append(reference.fingerprint(fingerprint_env, fingerprint_rest))
        first_epoch = start_epoch if iteration == start_iteration else 0
        for epoch in range(first_epoch, cfg.epochs):
            degenerate_steps = 0
            for idx in epoch_batches(len(train_set), cfg, iteration, epoch):
                policy, extractor, record, assignment = step_fn(
                    train_set.subset(idx),
                    policy,
                    reference,
                    extractor,
                    cfg,
                    step=step,
                    iteration=iteration,
                    epoch=epoch,
                    probe=probe,
                )
                if not policy.is_finite():
                    raise ConfigError(f"parameters diverged at step {step}; lower eta")
                records.append(record)
                degenerate_steps += int(record.degenerate and not plain)
                if writer is not None:
                    writer.record(record)
                    if cfg.dump_envs and assignment is not None:
                        writer.envs(assignment, step)
                logger.debug(
                    f"step {step}: dpo={record.dpo_loss:.5f} mmd={record.mmd_penalty} "
                    f"K={record.k_discovered}"
                )
                step += 1
            if degenerate_steps:
                logger.warning(
                    f"Iteration {iteration} epoch {epoch}: {degenerate_steps} steps "
                    f"found fewer than two environments"
                )
            if writer is not None:
                writer.checkpoint(
                    TrainState(policy, extractor, reference, step, iteration, epoch)
                )
            last = records[-1] if records else None
            logger.info(
                f"Iteration {iteration} epoch {epoch} done at step {step}"
                + ("" if last is None else f", dpo loss {last.dpo_loss:.4f}")
            )
        if fingerprints[-1] != reference.fingerprint(fingerprint_env, fingerprint_rest):
            raise ConfigError("reference policy changed during training")

    summary = None if plain else env_summary(train_set, policy, extractor, cfg)
    result = TrainResult(policy, extractor, records, summary, fingerprints)
    if writer is not None:
        writer.summary(result.summary(cfg, plain))
    return result
