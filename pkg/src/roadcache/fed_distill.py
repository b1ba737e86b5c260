"""RSU knowledge caches and the vehicle-visit exchange.

Each RSU keeps, per vehicle, the newest uploaded fingerprint (HI) and
the newest model-output knowledge (KI).  A visiting vehicle uploads its
fingerprint and current recommendation list, receives the averaged
knowledge of its most similar peers, trains its local model against it,
and uploads fresh knowledge before leaving.  A backhaul merge
periodically reconciles all RSU caches to the per-vehicle latest.

Every over-the-air payload is metered: 4 bytes per real value or id,
8 bytes per timestamp.  Backhaul reconciliation is wired and unmetered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import latent_codec, ldpm
from .caching import top_m
from .errors import ProtocolError, ZeroNormError

ID_BYTES = 4
VALUE_BYTES = 4
TIME_BYTES = 8

MSG_HI = "HI"
MSG_KI = "KI"
MSG_KNOWLEDGE_DOWN = "KNOWLEDGE_DOWN"
MSG_REC_LIST = "REC_LIST"
MSG_FL_MODEL_DOWN = "FL_MODEL_DOWN"
MSG_FL_MODEL_UP = "FL_MODEL_UP"

UPLINK_KINDS = frozenset({MSG_HI, MSG_KI, MSG_REC_LIST, MSG_FL_MODEL_UP})


def hi_bytes(latent_dim: int) -> int:
    return ID_BYTES + VALUE_BYTES * latent_dim + TIME_BYTES


def ki_bytes(latent_dim: int) -> int:
    return ID_BYTES + VALUE_BYTES * latent_dim + TIME_BYTES


def knowledge_bytes(latent_dim: int) -> int:
    return VALUE_BYTES * latent_dim


def rec_list_bytes(list_length: int) -> int:
    return ID_BYTES * list_length


def model_bytes(param_count: int) -> int:
    return VALUE_BYTES * param_count


@dataclass(frozen=True)
class Message:
    time: float
    src: str
    dst: str
    kind: str
    nbytes: int


@dataclass(frozen=True)
class HIPair:
    hash: np.ndarray
    vehicle_id: int
    upload_time: float


@dataclass(frozen=True)
class KIPair:
    knowledge: np.ndarray
    vehicle_id: int
    upload_time: float


@dataclass
class KnowledgeCache:
    rsu_id: int
    hi: dict[int, HIPair] = field(default_factory=dict)
    ki: dict[int, KIPair] = field(default_factory=dict)

    def copy_with_rsu(self, rsu_id: int) -> "KnowledgeCache":
        return KnowledgeCache(rsu_id=rsu_id, hi=dict(self.hi), ki=dict(self.ki))

    def equals(self, other: "KnowledgeCache") -> bool:
        if set(self.hi) != set(other.hi) or set(self.ki) != set(other.ki):
            return False
        for vid, pair in self.hi.items():
            peer = other.hi[vid]
            if pair.upload_time != peer.upload_time or not np.array_equal(pair.hash, peer.hash):
                return False
        for vid, pair in self.ki.items():
            peer = other.ki[vid]
            if pair.upload_time != peer.upload_time or not np.array_equal(pair.knowledge, peer.knowledge):
                return False
        return True


def upsert_hi(kc: KnowledgeCache, pair: HIPair) -> KnowledgeCache:
    kc.hi[pair.vehicle_id] = pair
    return kc


def upsert_ki(kc: KnowledgeCache, pair: KIPair) -> KnowledgeCache:
    kc.ki[pair.vehicle_id] = pair
    return kc


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity undefined for a zero vector")
    return float(a @ b / (na * nb))


def find_neighbors(kc: KnowledgeCache, vehicle_id: int, count: int, gamma: float) -> list[int]:
    """Ids of the most similar other vehicles clearing the gamma floor.

    Ordered by descending similarity with ascending-id tie breaks; zero
    fingerprints can never qualify.
    """
    if vehicle_id not in kc.hi:
        raise ProtocolError(f"vehicle {vehicle_id} has no fingerprint at RSU {kc.rsu_id}")
    own = kc.hi[vehicle_id].hash
    if np.linalg.norm(own) == 0.0:
        return []
    scored: list[tuple[float, int]] = []
    for vid, pair in kc.hi.items():
        if vid == vehicle_id:
            continue
        try:
            sim = cosine_similarity(own, pair.hash)
        except ZeroNormError:
            continue
        if sim >= gamma:
            scored.append((sim, vid))
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [vid for _, vid in scored[:count]]


def integrate_knowledge(kc: KnowledgeCache, neighbor_ids: list[int]) -> np.ndarray | None:
    """Elementwise mean of the neighbors' knowledge; None when none have any."""
    vectors = [kc.ki[vid].knowledge for vid in neighbor_ids if vid in kc.ki]
    if not vectors:
        return None
    return np.mean(np.stack(vectors), axis=0)


def merge_kc(rsu_kcs: list[KnowledgeCache]) -> KnowledgeCache:
    """Keep each vehicle's pair from the RSU holding its newest fingerprint.

    Timestamp ties go to the larger RSU id so the outcome never depends
    on input order.  The result is the backhaul's view; callers broadcast
    copies back to the RSUs.
    """
    if not rsu_kcs:
        raise ProtocolError("nothing to merge")
    merged = KnowledgeCache(rsu_id=-1)
    best: dict[int, tuple[float, int]] = {}
    for kc in rsu_kcs:
        for vid, pair in kc.hi.items():
            key = (pair.upload_time, kc.rsu_id)
            if vid not in best or key > best[vid]:
                best[vid] = key
                merged.hi[vid] = pair
                if vid in kc.ki:
                    merged.ki[vid] = kc.ki[vid]
                else:
                    merged.ki.pop(vid, None)
    return merged


@dataclass
class VisitSetup:
    """Everything vehicle-side a single visit needs."""

    vehicle_id: int
    vehicle_hash: np.ndarray
    carried_list: np.ndarray | None
    latents: np.ndarray
    denoiser: ldpm.DenoiserParams
    codec: latent_codec.CodecParams
    schedule: ldpm.NoiseSchedule
    distill_weight: float
    temperature: float
    episodes: int
    lr: float
    batch_size: int
    sample_count: int
    list_length: int
    neighbor_count: int = 10
    gamma: float = 0.5


@dataclass
class VisitBegin:
    messages: list[Message]
    integrated: np.ndarray | None
    proceed: bool


@dataclass
class VisitResult:
    messages: list[Message]
    rec_list: np.ndarray | None
    scores: np.ndarray | None
    completed: bool
    losses: list[float]


def begin_visit(kc: KnowledgeCache, setup: VisitSetup, now: float,
                residence: float, visit_seconds: float) -> VisitBegin:
    """Entry half of a visit: list and fingerprint up, knowledge down.

    Aborts (fingerprint only, no knowledge exchange) when the vehicle
    will leave before the local compute budget elapses.
    """
    vid = setup.vehicle_id
    veh, rsu = f"veh:{vid}", f"rsu:{kc.rsu_id}"
    latent_dim = len(setup.vehicle_hash)
    messages: list[Message] = []
    if setup.carried_list is not None:
        messages.append(Message(now, veh, rsu, MSG_REC_LIST, rec_list_bytes(len(setup.carried_list))))
    upsert_hi(kc, HIPair(hash=setup.vehicle_hash, vehicle_id=vid, upload_time=now))
    messages.append(Message(now, veh, rsu, MSG_HI, hi_bytes(latent_dim)))
    if residence < visit_seconds:
        return VisitBegin(messages=messages, integrated=None, proceed=False)
    neighbors = find_neighbors(kc, vid, count=setup.neighbor_count, gamma=setup.gamma)
    integrated = integrate_knowledge(kc, neighbors)
    if integrated is not None:
        messages.append(Message(now, rsu, veh, MSG_KNOWLEDGE_DOWN, knowledge_bytes(latent_dim)))
    return VisitBegin(messages=messages, integrated=integrated, proceed=True)


def latent_standardizer(latents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension shift and scale that map the latents to unit range.

    The generative model assumes roughly standard-normal data; encoder
    outputs are far from that, so each vehicle trains and samples in its
    own standardized coordinates.  Degenerate dimensions keep scale 1.
    """
    latents = np.atleast_2d(latents)
    mu = latents.mean(axis=0)
    sd = latents.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    return mu, sd


def train_and_predict(setup: VisitSetup, integrated: np.ndarray | None,
                      rng_train: np.random.Generator, rng_sample: np.random.Generator):
    """Compute half of a visit: distillation training, sampling, decoding.

    Returns (scores, rec_list, knowledge, losses); pure vehicle-side work.
    The neighbor target is mapped into the vehicle's standardized latent
    coordinates for training, and draws are mapped back before decoding,
    so knowledge exchanged over the air always lives in raw latent space.
    """
    if setup.latents.size == 0:
        latent_dim = setup.denoiser.latent_dim
        mu, sd = np.zeros(latent_dim), np.ones(latent_dim)
        losses: list[float] = []
    else:
        mu, sd = latent_standardizer(setup.latents)
        target = (integrated - mu) / sd if integrated is not None else None
        ctx = ldpm.DistillationContext(
            integrated_knowledge=target,
            distill_weight=setup.distill_weight if integrated is not None else 0.0,
            temperature=setup.temperature,
        )
        _, losses = ldpm.local_train(
            setup.denoiser, (setup.latents - mu) / sd, ctx, setup.schedule,
            setup.episodes, setup.lr, setup.batch_size, rng_train,
        )
    draws = ldpm.sample(setup.denoiser, setup.schedule, setup.sample_count, rng_sample)
    draws = draws * sd + mu
    reconstructions = latent_codec.decode(setup.codec, draws)
    scores = reconstructions.mean(axis=0)
    rec_list = top_m(scores, setup.list_length)
    knowledge = draws.mean(axis=0)
    return scores, rec_list, knowledge, losses


def complete_visit(kc: KnowledgeCache, vehicle_id: int, knowledge: np.ndarray,
                   now: float) -> list[Message]:
    """Exit half of a visit: fresh knowledge uploaded and stored."""
    upsert_ki(kc, KIPair(knowledge=knowledge, vehicle_id=vehicle_id, upload_time=now))
    return [Message(now, f"veh:{vehicle_id}", f"rsu:{kc.rsu_id}", MSG_KI, ki_bytes(len(knowledge)))]


def vehicle_visit(kc: KnowledgeCache, setup: VisitSetup, now: float, residence: float,
                  visit_seconds: float, rng_train: np.random.Generator,
                  rng_sample: np.random.Generator) -> VisitResult:
    """One whole visit against one RSU cache, with its byte ledger.

    This is the uninterleaved composition of the entry, compute, and exit
    halves; the event-driven harness calls the halves on its own clock.
    """
    begun = begin_visit(kc, setup, now, residence, visit_seconds)
    if not begun.proceed:
        return VisitResult(begun.messages, rec_list=None, scores=None, completed=False, losses=[])
    scores, rec_list, knowledge, losses = train_and_predict(setup, begun.integrated, rng_train, rng_sample)
    done = complete_visit(kc, setup.vehicle_id, knowledge, now + visit_seconds)
    return VisitResult(begun.messages + done, rec_list=rec_list, scores=scores,
                       completed=True, losses=losses)
