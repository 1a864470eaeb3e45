"""Per-pair variational registration by gradient descent on the posteriors.

``forward_ddr`` runs the full two-branch graph for one image pair —
downsample, sample the global velocity, exponentiate and warp; split into
chunks, sample per-chunk velocities, exponentiate and warp each; merge the
chunk velocities, fuse with the upsampled global field, exponentiate and
warp at full resolution — while recording every differentiable operation on
a :class:`Tape`.  ``backward_ddr`` replays the tape in reverse, accumulating
exact vector-Jacobian products into gradients for every posterior parameter.
``register_pair`` iterates forward/backward/Adam with a fresh noise draw per
iteration and returns the best parameters found under the noise-free
evaluation loss.

A branch weight of zero disables that branch's loss terms.  Zero chunk
weight additionally freezes the chunk posteriors: they stay at zero mean, so
the fused field reduces to the averaged upsampled global velocity and the
configuration degenerates to global-only registration (the ablation
baseline).  The global branch always feeds the fused field, so zero down
weight only removes the half-resolution loss terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chunks import (ChunkLayout, fuse_velocities, fuse_velocities_vjp,
                     make_chunk_layout, merge_chunks, merge_chunks_vjp,
                     split_chunks)
from .expmap import IntegrationConfig, _backprop_squarings, _scaling_squaring, exponentiate
from .fields import downsample, warp_image, warp_image_vjp
from .losses import (LOG_VAR_MAX, LOG_VAR_MIN, LossBreakdown, ObjectiveConfig,
                     VelocityPosterior, kl_loss, kl_loss_vjp, mse_loss,
                     mse_loss_vjp, sample_velocity, sample_velocity_vjp)

__all__ = [
    "OptimizerConfig",
    "Tape",
    "DivergenceError",
    "RegistrationResult",
    "forward_ddr",
    "backward_ddr",
    "adam_step",
    "register_pair",
]


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_iters: int = 300
    patience: int = 30
    min_rel_improvement: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must be in (0, 1), got {self.beta1}, {self.beta2}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite quantity.

    `last_result` holds the best finite registration state reached before
    the failure, when one exists.
    """

    def __init__(self, message, last_result=None):
        super().__init__(message)
        self.last_result = last_result


class Tape:
    """Record of one forward pass, replayable in reverse for gradients.

    Every differentiable operation is stored as ``(out_id, in_ids, vjp)``
    where `vjp` maps the upstream gradient to one gradient per input node.
    Leaf (parameter) nodes are ids without a producing operation.  A tape is
    single-use: the reverse sweep consumes it.
    """

    def __init__(self):
        self._ops = []
        self._next_id = 0
        self._consumed = False
        self.loss_id = None
        self.params = {}  # name -> (node id, array shape)

    def leaf(self, name, shape):
        node = self._fresh()
        self.params[name] = (node, tuple(shape))
        return node

    def _fresh(self):
        node = self._next_id
        self._next_id += 1
        return node

    def push(self, value, in_ids, vjp):
        node = self._fresh()
        self._ops.append((node, tuple(in_ids), vjp))
        return value, node

    def backward(self, seed=1.0):
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if self.loss_id is None:
            raise RuntimeError("tape has no recorded loss node")
        self._consumed = True
        grads = {self.loss_id: seed}
        for out_id, in_ids, vjp in reversed(self._ops):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for in_id, gi in zip(in_ids, vjp(g)):
                if gi is None:
                    continue
                held = grads.get(in_id)
                grads[in_id] = gi if held is None else held + gi
        return grads


def _check_image_pair(image0, image1):
    image0 = np.asarray(image0, dtype=float)
    image1 = np.asarray(image1, dtype=float)
    if image0.shape != image1.shape:
        raise ValueError(f"image shapes differ: {image0.shape} vs {image1.shape}")
    if image0.ndim not in (2, 3):
        raise ValueError(f"images must be 2-d or 3-d, got shape {image0.shape}")
    for img, name in ((image0, "source"), (image1, "target")):
        if not np.all(np.isfinite(img)):
            raise ValueError(f"{name} image has non-finite values")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError(f"{name} image intensities must lie in [0, 1]")
    return image0, image1


def _taped_sample(tape, post, noise, mu_id, lv_id):
    v = sample_velocity(post, noise)

    def vjp(g, post=post, noise=noise):
        return sample_velocity_vjp(post, noise, g)

    return tape.push(v, (mu_id, lv_id), vjp)


def _taped_exponentiate(tape, velocity, v_id, cfg):
    disp, steps = _scaling_squaring(velocity, cfg)

    def vjp(g, steps=steps):
        return (_backprop_squarings(steps, g),)

    return tape.push(disp, (v_id,), vjp)


def _taped_warp(tape, image, disp, disp_id):
    warped = warp_image(image, disp)

    def vjp(g, image=image, disp=disp):
        return (warp_image_vjp(image, disp, g)[1],)

    return tape.push(warped, (disp_id,), vjp)


def _taped_mse(tape, warped, warped_id, target, cfg):
    value = mse_loss(warped, target, cfg)

    def vjp(g, warped=warped, target=target):
        return (mse_loss_vjp(warped, target, cfg, g),)

    return tape.push(value, (warped_id,), vjp)


def _taped_kl(tape, post, mu_id, lv_id, cfg):
    value = kl_loss(post, cfg)

    def vjp(g, post=post):
        return kl_loss_vjp(post, cfg, g)

    return tape.push(value, (mu_id, lv_id), vjp)


def _taped_scale(tape, value, node, weight):
    return tape.push(weight * value, (node,), lambda g: (g * weight,))


def forward_ddr(image0, image1, global_post, chunk_posts, noise_global,
                noise_chunks, layout, objective_cfg=ObjectiveConfig(),
                integration_cfg=IntegrationConfig(), global_fuse_weight=0.5):
    """Run the full registration graph once; returns (LossBreakdown, Tape)."""
    image0, image1 = _check_image_pair(image0, image1)
    if layout.full_shape != image0.shape:
        raise ValueError(f"layout {layout.full_shape} does not match images {image0.shape}")
    k = layout.num_chunks
    if len(chunk_posts) != k:
        raise ValueError(f"expected {k} chunk posteriors, got {len(chunk_posts)}")
    down0 = downsample(image0)
    down1 = downsample(image1)
    if global_post.mu.shape != down0.shape + (image0.ndim,):
        raise ValueError(
            f"global posterior shape {global_post.mu.shape} does not match "
            f"downsampled grid {down0.shape}"
        )
    d = image0.ndim
    chunk_vec_shape = layout.chunk_shape + (d,)
    for post in chunk_posts:
        if post.mu.shape != chunk_vec_shape:
            raise ValueError(
                f"chunk posterior shape {post.mu.shape} does not match chunk "
                f"grid {layout.chunk_shape}"
            )

    w_down, w_chunk, w_full = objective_cfg.branch_weights
    lam = objective_cfg.kl_weight
    tape = Tape()
    addend_nodes = {}
    addends = {}

    # global branch: always sampled, it feeds the fused field
    g_mu = tape.leaf("global.mu", global_post.mu.shape)
    g_lv = tape.leaf("global.log_var", global_post.log_var.shape)
    v_global, vg_id = _taped_sample(tape, global_post, noise_global, g_mu, g_lv)

    mse_down = 0.0
    kl_global = 0.0
    if w_down > 0:
        disp_down, dd_id = _taped_exponentiate(tape, v_global, vg_id, integration_cfg)
        warped_down, wd_id = _taped_warp(tape, down0, disp_down, dd_id)
        mse_down, m_id = _taped_mse(tape, warped_down, wd_id, down1, objective_cfg)
        kl_global, k_id = _taped_kl(tape, global_post, g_mu, g_lv, objective_cfg)
        addends["down.mse"], addend_nodes["down.mse"] = _taped_scale(tape, mse_down, m_id, w_down)
        addends["down.kl"], addend_nodes["down.kl"] = _taped_scale(tape, kl_global, k_id, w_down * lam)

    # chunk branch: frozen at the posterior means when its weight is zero
    mse_chunks = [0.0] * k
    kl_chunks = [0.0] * k
    if w_chunk > 0:
        chunks0 = split_chunks(image0, layout)
        chunks1 = split_chunks(image1, layout)
        v_chunks = []
        vc_ids = []
        for i, post in enumerate(chunk_posts):
            c_mu = tape.leaf(f"chunk{i}.mu", post.mu.shape)
            c_lv = tape.leaf(f"chunk{i}.log_var", post.log_var.shape)
            v_i, vi_id = _taped_sample(tape, post, noise_chunks[i], c_mu, c_lv)
            v_chunks.append(v_i)
            vc_ids.append(vi_id)
            disp_i, di_id = _taped_exponentiate(tape, v_i, vi_id, integration_cfg)
            warped_i, wi_id = _taped_warp(tape, chunks0[i], disp_i, di_id)
            mse_chunks[i], mi_id = _taped_mse(tape, warped_i, wi_id, chunks1[i], objective_cfg)
            kl_chunks[i], ki_id = _taped_kl(tape, post, c_mu, c_lv, objective_cfg)
            addends[f"chunk{i}.mse"], addend_nodes[f"chunk{i}.mse"] = _taped_scale(
                tape, mse_chunks[i], mi_id, w_chunk / k)
            addends[f"chunk{i}.kl"], addend_nodes[f"chunk{i}.kl"] = _taped_scale(
                tape, kl_chunks[i], ki_id, w_chunk / k * lam)
        v_local = merge_chunks(v_chunks, layout)

        def merge_vjp(g, layout=layout):
            return merge_chunks_vjp(g, layout, vector=True)

        v_local, vl_id = tape.push(v_local, tuple(vc_ids), merge_vjp)
        fused = fuse_velocities(v_global, v_local, global_fuse_weight)

        def fuse_vjp(g, dims=down0.shape, w=global_fuse_weight):
            return fuse_velocities_vjp(g, dims, w)

        fused, fused_id = tape.push(fused, (vg_id, vl_id), fuse_vjp)
    else:
        v_local = merge_chunks([p.mu for p in chunk_posts], layout)
        fused = fuse_velocities(v_global, v_local, global_fuse_weight)

        def fuse_vjp_global(g, dims=down0.shape, w=global_fuse_weight):
            return (fuse_velocities_vjp(g, dims, w)[0],)

        fused, fused_id = tape.push(fused, (vg_id,), fuse_vjp_global)

    disp_full, df_id = _taped_exponentiate(tape, fused, fused_id, integration_cfg)
    warped_full, wf_id = _taped_warp(tape, image0, disp_full, df_id)
    mse_full, mf_id = _taped_mse(tape, warped_full, wf_id, image1, objective_cfg)
    addends["full.mse"], addend_nodes["full.mse"] = _taped_scale(tape, mse_full, mf_id, w_full)

    names = list(addends)
    total = 0.0
    for name in names:
        total += addends[name]
    _, total_id = tape.push(total, tuple(addend_nodes[n] for n in names),
                            lambda g, n=len(names): (g,) * n)
    tape.loss_id = total_id

    breakdown = LossBreakdown(
        total=total,
        addends=addends,
        mse_down=mse_down,
        kl_global=kl_global,
        mse_chunks=tuple(mse_chunks),
        kl_chunks=tuple(kl_chunks),
        mse_full=mse_full,
    )
    return breakdown, tape


def backward_ddr(tape):
    """Gradients of the recorded loss for every posterior parameter."""
    grads = tape.backward(1.0)
    out = {}
    for name, (node, shape) in tape.params.items():
        g = grads.get(node)
        out[name] = np.zeros(shape) if g is None else np.asarray(g, dtype=float)
    return out


def adam_step(params, grads, state, cfg, t):
    """One bias-corrected adaptive-moment update; returns (params, state).

    Log-variance parameters are re-clamped to their valid range after the
    step.
    """
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    new_params = {}
    new_state = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=float)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        m, v = state.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        p = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        if name.endswith("log_var"):
            p = np.clip(p, LOG_VAR_MIN, LOG_VAR_MAX)
        new_params[name] = p
        new_state[name] = (m, v)
    return new_params, new_state


@dataclass
class RegistrationResult:
    """Outcome of one pair registration.

    `phi_full` is the displacement of the fused-velocity deformation and is
    recomputable as ``exponentiate(fused_velocity)``.  `loss_trace` holds
    the noise-free evaluation breakdown per iteration; its last entry is the
    evaluation of the returned (best) parameters.
    """

    global_posterior: VelocityPosterior
    chunk_posteriors: list[VelocityPosterior]
    layout: ChunkLayout
    fused_velocity: np.ndarray
    phi_full: np.ndarray
    phi_down: np.ndarray
    phi_chunks: list[np.ndarray]
    loss_trace: list[LossBreakdown]
    converged: bool
    reason: str
    iterations: int


def _posteriors_from(params, k, chunk_frozen, layout, down_dims, d):
    g = VelocityPosterior(params["global.mu"], params["global.log_var"])
    if chunk_frozen:
        chunks = [VelocityPosterior.zeros(layout.chunk_shape) for _ in range(k)]
    else:
        chunks = [VelocityPosterior(params[f"chunk{i}.mu"], params[f"chunk{i}.log_var"])
                  for i in range(k)]
    return g, chunks


def register_pair(image0, image1, chunk_overlap=4,
                  objective_cfg=ObjectiveConfig(),
                  integration_cfg=IntegrationConfig(),
                  optimizer_cfg=OptimizerConfig(),
                  global_fuse_weight=0.5):
    """Optimize the velocity posteriors for one image pair.

    Intensities must be normalized to [0, 1] and every axis must be even.
    Returns the best state under the noise-free evaluation loss.
    """
    image0, image1 = _check_image_pair(image0, image1)
    if any(n % 2 for n in image0.shape):
        raise ValueError(f"image axes must be even, got shape {image0.shape}")
    d = image0.ndim
    layout = make_chunk_layout(image0.shape, chunk_overlap)
    down_dims = tuple(n // 2 for n in image0.shape)
    k = layout.num_chunks
    chunk_frozen = objective_cfg.branch_weights[1] == 0

    params = {
        "global.mu": np.zeros(down_dims + (d,)),
        "global.log_var": np.full(down_dims + (d,), -10.0),
    }
    if not chunk_frozen:
        for i in range(k):
            params[f"chunk{i}.mu"] = np.zeros(layout.chunk_shape + (d,))
            params[f"chunk{i}.log_var"] = np.full(layout.chunk_shape + (d,), -10.0)

    zero_g = np.zeros(down_dims + (d,))
    zero_c = [np.zeros(layout.chunk_shape + (d,)) for _ in range(k)]

    def evaluate(p):
        g_post, c_posts = _posteriors_from(p, k, chunk_frozen, layout, down_dims, d)
        breakdown, _ = forward_ddr(image0, image1, g_post, c_posts, zero_g, zero_c,
                                   layout, objective_cfg, integration_cfg,
                                   global_fuse_weight)
        return breakdown

    def assemble(p, trace, converged, reason, iterations):
        g_post, c_posts = _posteriors_from(p, k, chunk_frozen, layout, down_dims, d)
        v_local = merge_chunks([cp.mu for cp in c_posts], layout)
        fused = fuse_velocities(g_post.mu, v_local, global_fuse_weight)
        return RegistrationResult(
            global_posterior=g_post,
            chunk_posteriors=c_posts,
            layout=layout,
            fused_velocity=fused,
            phi_full=exponentiate(fused, integration_cfg),
            phi_down=exponentiate(g_post.mu, integration_cfg),
            phi_chunks=[exponentiate(cp.mu, integration_cfg) for cp in c_posts],
            loss_trace=trace,
            converged=converged,
            reason=reason,
            iterations=iterations,
        )

    rng = np.random.default_rng(optimizer_cfg.seed)
    trace = [evaluate(params)]
    best_total = trace[0].total
    best_params = params
    state = {}
    stall = 0
    converged = False
    reason = "max_iters reached"
    iterations = 0

    for t in range(1, optimizer_cfg.max_iters + 1):
        noise_g = rng.standard_normal(params["global.mu"].shape)
        noise_c = (zero_c if chunk_frozen else
                   [rng.standard_normal(params[f"chunk{i}.mu"].shape) for i in range(k)])
        g_post, c_posts = _posteriors_from(params, k, chunk_frozen, layout, down_dims, d)
        try:
            breakdown, tape = forward_ddr(image0, image1, g_post, c_posts, noise_g,
                                          noise_c, layout, objective_cfg,
                                          integration_cfg, global_fuse_weight)
            if not np.isfinite(breakdown.total):
                raise FloatingPointError("non-finite training loss")
            grads = backward_ddr(tape)
            params, state = adam_step(params, grads, state, optimizer_cfg, t)
            current = evaluate(params)
            if not np.isfinite(current.total):
                raise FloatingPointError("non-finite evaluation loss")
        except FloatingPointError as exc:
            raise DivergenceError(
                f"optimization diverged at iteration {t}: {exc}",
                last_result=assemble(best_params, trace, False,
                                     f"diverged at iteration {t}", t - 1),
            ) from exc
        trace.append(current)
        iterations = t
        improvement = (best_total - current.total) / max(abs(best_total), 1e-300)
        if current.total < best_total and improvement > optimizer_cfg.min_rel_improvement:
            best_total = current.total
            best_params = params
            stall = 0
        else:
            stall += 1
        if stall >= optimizer_cfg.patience:
            converged = True
            reason = (f"no relative improvement above {optimizer_cfg.min_rel_improvement} "
                      f"for {optimizer_cfg.patience} iterations")
            break

    # re-evaluate the returned parameters so the trace ends at the result state
    trace.append(evaluate(best_params))
    return assemble(best_params, trace, converged, reason, iterations)
