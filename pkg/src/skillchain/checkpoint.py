"""Versioned checkpoint container for policies, critics, discriminators,
normalizers, and optimizer state. One .npz file holds a whole skill chain;
architecture descriptors live in an embedded JSON header."""

from __future__ import annotations

import json

import numpy as np

from .discriminators import GailDiscriminator, InitSetDiscriminator
from .nn import AdamState, GaussianHead, Mlp, RunningNormalizer
from .ppo import Agent

FORMAT_TAG = "skillchain-ckpt-v1"


def _mlp_arrays(prefix: str, mlp: Mlp, out: dict) -> dict:
    out[f"{prefix}_flat"] = mlp.flat()
    return mlp.arch()


def _mlp_from(prefix: str, arch: dict, data) -> Mlp:
    dims = arch["dims"]
    mlp = Mlp.create(dims[0], tuple(dims[1:-1]), dims[-1])
    mlp.activations = list(arch["activations"])
    mlp.set_flat(data[f"{prefix}_flat"])
    return mlp


def _adam_arrays(prefix: str, st: AdamState, out: dict) -> dict:
    out[f"{prefix}_m"] = st.m
    out[f"{prefix}_v"] = st.v
    return {"t": st.t, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}


def _adam_from(prefix: str, meta: dict, data) -> AdamState:
    return AdamState(m=data[f"{prefix}_m"].copy(), v=data[f"{prefix}_v"].copy(),
                     t=int(meta["t"]), lr=meta["lr"], beta1=meta["beta1"],
                     beta2=meta["beta2"], eps=meta["eps"])


def save_chain_checkpoint(path, agents: list, gail_discs: list,
                          init_discs: list, extra_meta: dict | None = None) -> None:
    arrays: dict = {}
    meta = {"format": FORMAT_TAG, "k": len(agents), "extra": extra_meta or {}}
    for i, ag in enumerate(agents):
        p = f"agent{i}"
        meta[f"{p}_policy"] = _mlp_arrays(f"{p}_policy", ag.policy, arrays)
        meta[f"{p}_critic"] = _mlp_arrays(f"{p}_critic", ag.critic, arrays)
        arrays[f"{p}_logstd"] = ag.head.logstd
        meta[f"{p}_head"] = {"logstd_min": ag.head.logstd_min,
                             "logstd_max": ag.head.logstd_max}
        arrays[f"{p}_norm_mean"] = ag.normalizer.mean
        arrays[f"{p}_norm_var"] = ag.normalizer.var
        meta[f"{p}_norm"] = {"count": ag.normalizer.count,
                             "clip": ag.normalizer.clip, "eps": ag.normalizer.eps}
        meta[f"{p}_adam_policy"] = _adam_arrays(f"{p}_adam_policy", ag.adam_policy, arrays)
        meta[f"{p}_adam_critic"] = _adam_arrays(f"{p}_adam_critic", ag.adam_critic, arrays)
    for i, d in enumerate(gail_discs):
        p = f"gail{i}"
        meta[p] = {"arch": _mlp_arrays(p, d.mlp, arrays), "subtask": d.subtask}
        meta[f"{p}_adam"] = _adam_arrays(f"{p}_adam", d.adam, arrays)
    for i, d in enumerate(init_discs):
        p = f"init{i}"
        meta[p] = {"arch": _mlp_arrays(p, d.mlp, arrays), "subtask": d.subtask}
        meta[f"{p}_adam"] = _adam_arrays(f"{p}_adam", d.adam, arrays)
    arrays["meta_json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                        dtype=np.uint8)
    np.savez(path, **arrays)


def load_chain_checkpoint(path):
    data = np.load(path)
    meta = json.loads(bytes(data["meta_json"].tobytes()).decode())
    if meta.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported checkpoint format: {meta.get('format')}")
    agents, gail_discs, init_discs = [], [], []
    for i in range(meta["k"]):
        p = f"agent{i}"
        policy = _mlp_from(f"{p}_policy", meta[f"{p}_policy"], data)
        critic = _mlp_from(f"{p}_critic", meta[f"{p}_critic"], data)
        head = GaussianHead(data[f"{p}_logstd"].copy(),
                            meta[f"{p}_head"]["logstd_min"],
                            meta[f"{p}_head"]["logstd_max"])
        nm = meta[f"{p}_norm"]
        norm = RunningNormalizer(data[f"{p}_norm_mean"].copy(),
                                 data[f"{p}_norm_var"].copy(),
                                 nm["count"], nm["clip"], nm["eps"])
        ag = Agent(policy, head, critic, norm)
        ag.adam_policy = _adam_from(f"{p}_adam_policy", meta[f"{p}_adam_policy"], data)
        ag.adam_critic = _adam_from(f"{p}_adam_critic", meta[f"{p}_adam_critic"], data)
        agents.append(ag)
        gp = f"gail{i}"
        gd = GailDiscriminator(mlp=_mlp_from(gp, meta[gp]["arch"], data),
                               subtask=meta[gp]["subtask"],
                               adam=_adam_from(f"{gp}_adam", meta[f"{gp}_adam"], data))
        gail_discs.append(gd)
        ip = f"init{i}"
        idn = InitSetDiscriminator(mlp=_mlp_from(ip, meta[ip]["arch"], data),
                                   subtask=meta[ip]["subtask"],
                                   adam=_adam_from(f"{ip}_adam", meta[f"{ip}_adam"], data))
        init_discs.append(idn)
    return agents, gail_discs, init_discs, meta["extra"]
