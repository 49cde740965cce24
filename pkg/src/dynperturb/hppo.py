"""Two-level PPO: a high-level actor-critic over neuron categories and a
low-level actor-critic over (perturbation type, magnitude) conditioned on the
chosen category through a learned embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import store
from .env import N_TYPES, HierAction

DTYPE = torch.float64


class UpdateError(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    epochs: int = 4
    minibatch: int = 64
    lr_high: float = 3e-4
    lr_low: float = 3e-4
    horizon: int = 256
    hidden: int = 64
    embed_dim: int = 8
    schedule: str = "simultaneous"

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.clip <= 0 or self.epochs < 1 or self.minibatch < 1 or self.horizon < 1:
            raise ValueError("invalid PPO hyperparameters")
        if self.schedule not in ("simultaneous", "alternating"):
            raise ValueError("schedule must be 'simultaneous' or 'alternating'")


def mlp(n_in: int, hidden: int, n_out: int, gen: torch.Generator, out_gain: float) -> nn.Sequential:
    """Two tanh hidden layers with orthogonal init; ``out_gain=0`` zeroes the head."""
    layers = [nn.Linear(n_in, hidden, dtype=DTYPE), nn.Tanh(),
              nn.Linear(hidden, hidden, dtype=DTYPE), nn.Tanh(),
              nn.Linear(hidden, n_out, dtype=DTYPE)]
    with torch.no_grad():
        for lin, gain in ((layers[0], 5 / 3), (layers[2], 5 / 3), (layers[4], out_gain)):
            if gain == 0:
                lin.weight.zero_()
            else:
                nn.init.orthogonal_(lin.weight, gain=gain, generator=gen)
            lin.bias.zero_()
    return nn.Sequential(*layers)


class HighLevel(nn.Module):
    def __init__(self, state_dim: int, n_h: int, hidden: int, gen: torch.Generator):
        super().__init__()
        self.actor = mlp(state_dim, hidden, n_h, gen, 0.0)
        self.critic = mlp(state_dim, hidden, 1, gen, 1.0)

    def forward(self, s: torch.Tensor):
        return self.actor(s), self.critic(s).squeeze(-1)


class LowLevel(nn.Module):
    def __init__(self, state_dim: int, n_h: int, n_m: int, hidden: int, embed_dim: int, gen: torch.Generator):
        super().__init__()
        self.n_m = n_m
        self.embed = nn.Parameter(torch.randn(n_h, embed_dim, generator=gen, dtype=DTYPE))
        self.actor = mlp(state_dim + embed_dim, hidden, N_TYPES + n_m, gen, 0.0)
        self.critic = mlp(state_dim + embed_dim, hidden, 1, gen, 1.0)

    def inputs(self, s: torch.Tensor, a_h: torch.Tensor) -> torch.Tensor:
        return torch.cat([s, self.embed[a_h]], dim=-1)

    def forward(self, s: torch.Tensor, a_h: torch.Tensor):
        x = self.inputs(s, a_h)
        logits = self.actor(x)
        return logits[..., :N_TYPES], logits[..., N_TYPES:], self.critic(x).squeeze(-1)


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def _check(logits: torch.Tensor) -> None:
    if not bool(torch.isfinite(logits).all()):
        raise FloatingPointError("non-finite policy logits")


@torch.no_grad()
def act_high(state: np.ndarray, net: HighLevel, rng: np.random.Generator | None, deterministic: bool = False):
    logits, v = net(torch.as_tensor(state, dtype=DTYPE))
    _check(logits)
    logp_all = logits.log_softmax(-1)
    probs = logp_all.exp().numpy()
    a = int(np.argmax(probs)) if deterministic else _sample(probs, rng)
    return a, float(logp_all[a]), float(v), probs


@torch.no_grad()
def act_low(state: np.ndarray, a_h: int, net: LowLevel, rng: np.random.Generator | None,
            deterministic: bool = False):
    lt, lm, v = net(torch.as_tensor(state, dtype=DTYPE), torch.tensor(a_h))
    _check(lt)
    _check(lm)
    lpt, lpm = lt.log_softmax(-1), lm.log_softmax(-1)
    pt, pm = lpt.exp().numpy(), lpm.exp().numpy()
    if deterministic:
        t, m = int(np.argmax(pt)), int(np.argmax(pm))
    else:
        t, m = _sample(pt, rng), _sample(pm, rng)
    return t, m, float(lpt[t] + lpm[m]), float(v), (pt, pm)


@dataclass
class Transition:
    state: np.ndarray
    a_h: int
    a_type: int
    a_mag: int
    reward: float
    next_state: np.ndarray
    done: bool
    logp_h: float
    logp_l: float
    v_h: float
    v_l: float


def compute_gae(rewards, values, dones, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Advantages and returns; ``values`` has one extra bootstrap entry at the end."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = len(rewards)
    if len(values) != T + 1 or len(dones) != T:
        raise ValueError("need len(values) == len(rewards) + 1 == len(dones) + 1")
    adv = np.zeros(T)
    running = 0.0
    for t in reversed(range(T)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
    return adv, adv + values[:-1]


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


def categorical_entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = logits.log_softmax(-1)
    return -(logp.exp() * logp).sum(-1)


@dataclass
class Batch:
    """Tensors for one level's PPO loss."""

    states: torch.Tensor
    a_h: torch.Tensor
    a_type: torch.Tensor
    a_mag: torch.Tensor
    old_logp: torch.Tensor
    adv: torch.Tensor
    returns: torch.Tensor

    def subset(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def surrogate(ratio: torch.Tensor, adv: torch.Tensor, clip: float) -> torch.Tensor:
    """Elementwise clipped objective min(r A, clip(r) A) (to be maximized)."""
    return torch.min(ratio * adv, ratio.clamp(1 - clip, 1 + clip) * adv)


def ppo_loss(net: nn.Module, batch: Batch, cfg: PPOConfig, level: str):
    if level == "high":
        logits, v = net(batch.states)
        logp = logits.log_softmax(-1).gather(-1, batch.a_h[:, None]).squeeze(-1)
        ent = categorical_entropy(logits)
        ents = (ent.mean(),)
    elif level == "low":
        lt, lm, v = net(batch.states, batch.a_h)
        logp = (lt.log_softmax(-1).gather(-1, batch.a_type[:, None]).squeeze(-1)
                + lm.log_softmax(-1).gather(-1, batch.a_mag[:, None]).squeeze(-1))
        et, em = categorical_entropy(lt), categorical_entropy(lm)
        ent = et + em
        ents = (et.mean(), em.mean())
    else:
        raise ValueError(f"unknown level {level!r}")
    ratio = (logp - batch.old_logp).exp()
    l_clip = -surrogate(ratio, batch.adv, cfg.clip).mean()
    l_vf = ((v - batch.returns) ** 2).mean()
    entropy = ent.mean()
    total = l_clip + cfg.value_coef * l_vf - cfg.entropy_coef * entropy
    return total, {"policy": l_clip, "value": l_vf, "entropy": entropy, "head_entropies": ents}


def ppo_update(net: nn.Module, opt: torch.optim.Optimizer, batch: Batch, cfg: PPOConfig, level: str,
               rng: np.random.Generator) -> dict:
    """K epochs of shuffled minibatch steps; on a NaN loss the parameters are restored."""
    snapshot = {k: v.clone() for k, v in net.state_dict().items()}
    opt_snapshot = _clone_opt_state(opt)
    n = len(batch.adv)
    report = {"policy": 0.0, "value": 0.0, "entropy": 0.0, "n": 0}
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            mb = batch.subset(torch.as_tensor(perm[start:start + cfg.minibatch]))
            total, parts = ppo_loss(net, mb, cfg, level)
            if not torch.isfinite(total):
                net.load_state_dict(snapshot)
                opt.load_state_dict(opt_snapshot)
                raise UpdateError(f"{level}-level PPO loss is not finite: {float(total.detach())}")
            opt.zero_grad()
            total.backward()
            opt.step()
            for key in ("policy", "value", "entropy"):
                report[key] += float(parts[key].detach())
            report["n"] += 1
    for key in ("policy", "value", "entropy"):
        report[key] /= max(1, report["n"])
    return report


def _clone_opt_state(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    return {"state": {k: {n: (t.clone() if torch.is_tensor(t) else t) for n, t in v.items()}
                      for k, v in sd["state"].items()},
            "param_groups": [dict(g) for g in sd["param_groups"]]}


@dataclass
class EpisodeLog:
    episode: int
    case_id: str
    steps: list[dict] = field(default_factory=list)
    gates: list = field(default_factory=list)
    total_reward: float = 0.0
    finished: bool = False


@dataclass
class Rollout:
    transitions: list[Transition]
    episodes: list[EpisodeLog]
    bootstrap_h: float
    bootstrap_l: float
    next_episode: int


class HierarchicalAgent:
    def __init__(self, state_dim: int, n_h: int, n_m: int, cfg: PPOConfig | None = None, seed: int = 0):
        self.cfg = cfg or PPOConfig()
        self.state_dim, self.n_h, self.n_m, self.seed = state_dim, n_h, n_m, seed
        gen = torch.Generator().manual_seed(seed)
        self.high = HighLevel(state_dim, n_h, self.cfg.hidden, gen)
        self.low = LowLevel(state_dim, n_h, n_m, self.cfg.hidden, self.cfg.embed_dim, gen)
        self.opt_high = torch.optim.Adam(self.high.parameters(), lr=self.cfg.lr_high)
        self.opt_low = torch.optim.Adam(self.low.parameters(), lr=self.cfg.lr_low)
        self.rng = np.random.default_rng([seed, 99])
        self.updates = 0

    def act(self, state: np.ndarray, deterministic: bool = False):
        a_h, lp_h, v_h, _ = act_high(state, self.high, self.rng, deterministic)
        t, m, lp_l, v_l, _ = act_low(state, a_h, self.low, self.rng, deterministic)
        return HierAction(a_h, t, m), lp_h, lp_l, v_h, v_l

    def random_act(self, state: np.ndarray):
        """Uniform action with values from the critics (used by the random-action ablation)."""
        a = HierAction(int(self.rng.integers(self.n_h)), int(self.rng.integers(N_TYPES)),
                       int(self.rng.integers(self.n_m)))
        with torch.no_grad():
            s = torch.as_tensor(state, dtype=DTYPE)
            v_h = float(self.high(s)[1])
            v_l = float(self.low(s, torch.tensor(a.a_h))[2])
        return a, -math.log(self.n_h), -math.log(N_TYPES * self.n_m), v_h, v_l

    @torch.no_grad()
    def bootstrap(self, state: np.ndarray) -> tuple[float, float]:
        s = torch.as_tensor(state, dtype=DTYPE)
        logits, v_h = self.high(s)
        probs = logits.softmax(-1)
        v_l = torch.stack([self.low(s, torch.tensor(k))[2] for k in range(self.n_h)])
        return float(v_h), float((probs * v_l).sum())

    def batches(self, rollout: Rollout) -> tuple[Batch, Batch]:
        tr = rollout.transitions
        rewards = [t.reward for t in tr]
        dones = [t.done for t in tr]
        adv_h, ret_h = compute_gae(rewards, [t.v_h for t in tr] + [rollout.bootstrap_h], dones,
                                   self.cfg.gamma, self.cfg.lam)
        adv_l, ret_l = compute_gae(rewards, [t.v_l for t in tr] + [rollout.bootstrap_l], dones,
                                   self.cfg.gamma, self.cfg.lam)
        states = torch.as_tensor(np.stack([t.state for t in tr]), dtype=DTYPE)
        a_h = torch.tensor([t.a_h for t in tr])
        a_t = torch.tensor([t.a_type for t in tr])
        a_m = torch.tensor([t.a_mag for t in tr])

        def mk(old, adv, ret):
            return Batch(states, a_h, a_t, a_m, torch.tensor(old, dtype=DTYPE),
                         torch.as_tensor(normalize_advantages(adv), dtype=DTYPE),
                         torch.as_tensor(ret, dtype=DTYPE))

        return mk([t.logp_h for t in tr], adv_h, ret_h), mk([t.logp_l for t in tr], adv_l, ret_l)

    def update(self, rollout: Rollout) -> dict:
        bh, bl = self.batches(rollout)
        do_high = self.cfg.schedule == "simultaneous" or self.updates % 2 == 0
        do_low = self.cfg.schedule == "simultaneous" or self.updates % 2 == 1
        report = {}
        if do_high:
            report["high"] = ppo_update(self.high, self.opt_high, bh, self.cfg, "high", self.rng)
        if do_low:
            report["low"] = ppo_update(self.low, self.opt_low, bl, self.cfg, "low", self.rng)
        self.updates += 1
        return report

    @torch.no_grad()
    def policy_probs(self, state: np.ndarray):
        s = torch.as_tensor(state, dtype=DTYPE)
        ph = self.high(s)[0].softmax(-1).numpy()
        low = [tuple(x.softmax(-1).numpy() for x in self.low(s, torch.tensor(k))[:2]) for k in range(self.n_h)]
        return ph, low

    # -- persistence --

    def save(self, path) -> None:
        arrays = {}
        for prefix, mod in (("high", self.high), ("low", self.low)):
            for k, v in mod.state_dict().items():
                arrays[f"{prefix}/{k}"] = v.numpy()
        groups = {}
        for prefix, opt in (("opt_high", self.opt_high), ("opt_low", self.opt_low)):
            sd = opt.state_dict()
            for idx, st in sd["state"].items():
                for name, t in st.items():
                    arrays[f"{prefix}/{idx}/{name}"] = t.numpy()
            groups[prefix] = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
        meta = {"ppo": asdict(self.cfg), "state_dim": self.state_dim, "n_h": self.n_h, "n_m": self.n_m,
                "seed": self.seed, "updates": self.updates, "rng": self.rng.bit_generator.state,
                "param_groups": groups}
        store.save_arrays(path, "agent", arrays, meta)

    @classmethod
    def load(cls, path) -> "HierarchicalAgent":
        arrays, meta = store.load_arrays(path, kind="agent")
        agent = cls(meta["state_dim"], meta["n_h"], meta["n_m"], PPOConfig(**meta["ppo"]), meta["seed"])
        for prefix, mod in (("high", agent.high), ("low", agent.low)):
            mod.load_state_dict({k[len(prefix) + 1:]: torch.from_numpy(v)
                                 for k, v in arrays.items() if k.startswith(prefix + "/")})
        for prefix, opt in (("opt_high", agent.opt_high), ("opt_low", agent.opt_low)):
            state: dict = {}
            for k, v in arrays.items():
                parts = k.split("/")
                if parts[0] == prefix:
                    state.setdefault(int(parts[1]), {})[parts[2]] = torch.from_numpy(v)
            groups = meta["param_groups"][prefix]
            for g in groups:
                if isinstance(g.get("betas"), list):
                    g["betas"] = tuple(g["betas"])
            opt.load_state_dict({"state": state, "param_groups": groups})
        agent.rng.bit_generator.state = meta["rng"]
        agent.updates = meta["updates"]
        return agent


EnvFactory = Callable[[int], object]


def collect_rollouts(env_factory: EnvFactory, agent: HierarchicalAgent, horizon: int, start_episode: int = 0,
                     random_actions: bool = False, case_id: Callable[[object], str] | None = None) -> Rollout:
    """Run episodes until ``horizon`` transitions are stored.

    Both levels see the same environmental reward. An episode cut off by the
    horizon is bootstrapped from the critics and logged as unfinished.
    """
    if horizon < 1:
        raise ValueError("horizon must be positive")
    transitions: list[Transition] = []
    episodes: list[EpisodeLog] = []
    ep = start_episode
    env = None
    state = None
    log = None
    while len(transitions) < horizon:
        if env is None or env.done:
            env = env_factory(ep)
            state = env.reset()
            log = EpisodeLog(ep, case_id(env) if case_id else "")
            episodes.append(log)
            ep += 1
        if random_actions:
            action, lp_h, lp_l, v_h, v_l = agent.random_act(state)
        else:
            action, lp_h, lp_l, v_h, v_l = agent.act(state)
        try:
            nxt, reward, done, info = env.step(action)
        except Exception as exc:
            raise RuntimeError(f"environment failed in episode {log.episode} step {len(log.steps)}") from exc
        transitions.append(Transition(state, action.a_h, action.a_type, action.a_mag, reward, nxt, done,
                                      lp_h, lp_l, v_h, v_l))
        log.steps.append({"t": len(log.steps), "action": action, "scores": info["scores"], "reward": reward,
                          "bonus": info["bonus"], "done": done, "output": info["output"]})
        if info.get("gates") is not None:
            log.gates.append(info["gates"])
        log.total_reward += reward
        log.finished = done
        state = nxt
    if env.done:
        bh = bl = 0.0
    else:
        bh, bl = agent.bootstrap(state)
    return Rollout(transitions, episodes, bh, bl, ep)
