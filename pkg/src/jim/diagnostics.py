"""Repo-wide gradient verification battery and the partition benchmark.

The battery drives finite differences through every hand-written backward
in the package: each layer type, each network, the monotonic mixer, the KL
loss gradients and finally the fully assembled training objective (with
its stop-gradient quantities switched off, since those are constants by
design). It backs both the ``gradcheck`` CLI subcommand and the numerics
acceptance criterion.
"""

from __future__ import annotations

import numpy as np

from .config import ExperimentConfig
from .env import EnvConfig, make_env
from .mixer import (
    MonotonicMixer,
    alignment_grad_qlogits,
    alignment_loss,
    diversity_grad_plogits,
    diversity_grad_qlogits,
    diversity_loss,
    kl_grad_plogits,
)
from .numeric import (
    DenseLayer,
    GradCheckReport,
    GruCell,
    categorical_kl,
    finite_diff_gradcheck,
    softmax,
)
from .policy import IntentionNet, PosteriorNet, build_networks
from .trainer import compute_losses, play_episode

DEFAULT_TOL = 1e-4
DEFAULT_PERTURB = 1e-5


def _check(name, loss_fn, params, entries, rng, tol, perturb, sections):
    report = finite_diff_gradcheck(loss_fn, params, perturb=perturb, tol=tol,
                                   max_entries_per_block=entries, rng=rng)
    sections.append((name, report))
    return report


def run_gradcheck_battery(seed: int = 0, tol: float = DEFAULT_TOL,
                          perturb: float = DEFAULT_PERTURB,
                          entries_per_block: int = 12):
    """Returns a list of (section name, GradCheckReport)."""
    rng = np.random.default_rng(seed)
    fd_rng = np.random.default_rng(seed + 1)
    sections: list[tuple[str, GradCheckReport]] = []

    # dense layer, every activation
    for act in ("identity", "relu", "tanh"):
        layer = DenseLayer(f"dense_{act}", 5, 4, act, rng=rng)
        x = rng.normal(size=(6, 5))
        target = rng.normal(size=(6, 4))

        def loss(layer=layer, x=x, target=target):
            y, _ = layer.forward(x)
            return float(((y - target) ** 2).sum())

        y, cache = layer.forward(x)
        for p in layer.parameters():
            p.zero_grad()
        layer.backward(cache, 2.0 * (y - target))
        _check(f"dense[{act}]", loss, layer.parameters(), entries_per_block,
               fd_rng, tol, perturb, sections)

    # recurrent cell unrolled over several steps
    cell = GruCell("gru", 4, 5, rng=rng)
    xs = rng.normal(size=(7, 3, 4))
    h0 = rng.normal(size=(3, 5))
    target = rng.normal(size=(3, 5))

    def gru_loss():
        h = h0
        for t in range(xs.shape[0]):
            h, _ = cell.forward(xs[t], h)
        return float(((h - target) ** 2).sum())

    h = h0
    caches = []
    for t in range(xs.shape[0]):
        h, c = cell.forward(xs[t], h)
        caches.append(c)
    for p in cell.parameters():
        p.zero_grad()
    dh = 2.0 * (h - target)
    for c in reversed(caches):
        _, dh = cell.backward(c, dh)
    _check("gru[bptt]", gru_loss, cell.parameters(), entries_per_block, fd_rng,
           tol, perturb, sections)

    # intention network
    net = IntentionNet(obs_dim=6, n_intentions=5, rng=rng, hidden=8, narrow=4)
    obs = rng.normal(size=(4, 6))

    def int_loss():
        q, _ = net.forward(obs)
        return float((q ** 2).sum())

    q, cachelist = net.forward(obs)
    for p in net.parameters():
        p.zero_grad()
    net.backward(cachelist, 2.0 * q)
    _check("intention", int_loss, net.parameters(), entries_per_block, fd_rng,
           tol, perturb, sections)

    # posterior network with each KL loss gradient
    post = PosteriorNet(obs_dim=5, n_intentions=6, rng=rng, hidden=8)
    pin = post.pair_input(rng.normal(size=5), rng.normal(size=5))
    p_row = softmax(rng.normal(size=6))
    chosen = 2

    def post_loss():
        logits, _ = post.forward(pin)
        qd = softmax(logits)[0]
        return (alignment_loss(p_row, qd)
                + 0.7 * diversity_loss(p_row, qd, chosen))

    logits, cachelist = post.forward(pin)
    qd = softmax(logits)[0]
    for p in post.parameters():
        p.zero_grad()
    grad = (alignment_grad_qlogits(p_row, qd)
            + 0.7 * diversity_grad_qlogits(p_row, qd, chosen))
    post.backward(cachelist, grad[None, :])
    _check("posterior[kl-losses]", post_loss, post.parameters(),
           entries_per_block, fd_rng, tol, perturb, sections)

    # policy-logit paths of the KL losses
    pol = IntentionNet(obs_dim=5, n_intentions=6, rng=rng, hidden=8, narrow=4)
    pobs = rng.normal(size=5)
    q_fixed = softmax(rng.normal(size=6))
    temp = 1.2

    def plogit_loss():
        qv, _ = pol.forward(pobs)
        pd = softmax(qv, temp)
        return (float(categorical_kl(pd, q_fixed))
                + 0.5 * diversity_loss(pd, q_fixed, chosen))

    qv, cachelist = pol.forward(pobs)
    pd = softmax(qv, temp)
    for p in pol.parameters():
        p.zero_grad()
    pol.backward(cachelist,
                 kl_grad_plogits(pd, q_fixed, temp)
                 + 0.5 * diversity_grad_plogits(pd, q_fixed, chosen, temp))
    _check("intention[kl-to-policy]", plogit_loss, pol.parameters(),
           entries_per_block, fd_rng, tol, perturb, sections)

    # monotonic mixer hypernetworks
    mixer = MonotonicMixer(state_dim=4, n_agents=3, rng=rng, embed=5)
    qs = rng.normal(size=(5, 3))
    st = rng.normal(size=(5, 4))

    def mix_loss():
        q_tot, _ = mixer.forward(qs, st)
        return float((q_tot ** 2).sum())

    q_tot, cache = mixer.forward(qs, st)
    for p in mixer.parameters():
        p.zero_grad()
    mixer.backward(cache, 2.0 * q_tot)
    _check("mixer[hypernets]", mix_loss, mixer.parameters(), entries_per_block,
           fd_rng, tol, perturb, sections)

    # fully assembled objective on a miniature environment; alphas are pinned
    # (no_weighting) and the intrinsic term zeroed so no stop-gradient
    # quantity varies under perturbation. Each parameter group is compared
    # against the scalar it actually descends: the behavior/mixer group the
    # combined objective, the posterior its per-sample bound objective, the
    # intention group the high-level TD plus the KL-to-policy terms.
    nets, cfg, episodes = assembled_probe(seed, perturb)
    compute_losses(nets, episodes, cfg, with_grads=True)

    def group_loss(pick):
        def loss():
            b = compute_losses(nets, episodes, cfg, with_grads=False)
            return pick(b)
        return loss

    n_entries = max(entries_per_block // 2, 4)
    _check("objective[behavior+mixer]",
           group_loss(lambda b: b.total(cfg.lambda_aux, cfg.lambda_div)),
           nets.behavior_parameters(), n_entries, fd_rng, tol, perturb, sections)
    _check("objective[posterior]",
           group_loss(lambda b: b.posterior_objective(cfg.lambda_aux,
                                                      cfg.lambda_div)),
           nets.posterior_parameters(), n_entries, fd_rng, tol, perturb, sections)
    _check("objective[intention]",
           group_loss(lambda b: b.intention_objective(cfg.lambda_aux,
                                                      cfg.lambda_div, True)),
           nets.intention_parameters(), n_entries, fd_rng, tol, perturb, sections)

    return sections


def abs_kink_margin(nets, episodes) -> float:
    """Distance from the nearest |.| kink of the mixing hypernetworks over
    every state the batch touches (online and target)."""
    states = np.concatenate([ep.state for ep in episodes])
    margin = np.inf
    for mixer in (nets.mixer, nets.target_mixer):
        for hyper in (mixer.hyper_w1, mixer.hyper_w2):
            raw, _ = hyper.forward(states)
            margin = min(margin, float(np.abs(raw).min()))
    return margin


def assembled_probe(seed: int, perturb: float, batch: int = 2):
    """Nets plus episodes for the end-to-end check, rerolled deterministically
    until every |.| kink of the mixer sits well outside the FD window
    (central differences are only meaningful where the objective is smooth
    across the perturbation)."""
    env_cfg = EnvConfig(kind="pursuit", n_agents=2, n_enemies=1, map_w=7,
                        map_h=7, n_walls=2, view_radius=1, episode_limit=8,
                        seed=0)
    cfg = ExperimentConfig(env=env_cfg, mode="no_weighting", beta_intrinsic=0.0,
                           kl_to_intention=True, n_intentions=4, hidden_dim=8,
                           intention_narrow=4, mixing_embed=4).resolved()
    env = make_env(cfg.env)
    for attempt in range(50):
        nets = build_networks(cfg, np.random.default_rng(seed + 2 + 1000 * attempt))
        ep_rng = np.random.default_rng(seed + 3 + 1000 * attempt)
        episodes = [play_episode(nets, cfg, env, int(ep_rng.integers(2 ** 31)),
                                 lambda s: 0.6, ep_rng, ep_rng,
                                 collect_observer=True) for _ in range(batch)]
        if abs_kink_margin(nets, episodes) > 50.0 * perturb:
            return nets, cfg, episodes
    raise RuntimeError("could not find a kink-free probe configuration")


def battery_passed(sections) -> bool:
    return all(report.passed for _, report in sections)


def battery_lines(sections) -> list[str]:
    out = []
    for name, report in sections:
        flag = "PASS" if report.passed else "FAIL"
        worst = max(b.max_rel_err for b in report.blocks)
        out.append(f"[{flag}] {name}: worst rel err {worst:.3e} "
                   f"over {len(report.blocks)} blocks (tol {report.tol:g})")
        if not report.passed:
            out.extend("    " + line for line in report.lines())
    out.append("gradcheck battery: " + ("PASS" if battery_passed(sections) else "FAIL"))
    return out
