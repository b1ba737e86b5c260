"""Knowledge caches, neighbor search, merges, and the visit protocol."""

import numpy as np
import pytest

from roadcache import fed_distill as fd
from roadcache import latent_codec, ldpm
from roadcache.errors import ProtocolError, ZeroNormError
from roadcache.rng import substream

LATENT_DIM = 4


def make_kc(rsu_id=0):
    return fd.KnowledgeCache(rsu_id=rsu_id)


def seeded_kc(rng, vehicles, rsu_id=0, with_ki=True):
    kc = make_kc(rsu_id)
    for vid in vehicles:
        fd.upsert_hi(kc, fd.HIPair(hash=rng.normal(size=LATENT_DIM),
                                   vehicle_id=vid, upload_time=float(vid)))
        if with_ki:
            fd.upsert_ki(kc, fd.KIPair(knowledge=rng.normal(size=LATENT_DIM),
                                       vehicle_id=vid, upload_time=float(vid)))
    return kc


def make_setup(vid, vehicle_hash, latents, carried=None, **overrides):
    rng = substream(99, "setup", vid)
    kwargs = dict(
        vehicle_id=vid,
        vehicle_hash=vehicle_hash,
        carried_list=carried,
        latents=latents,
        denoiser=ldpm.new_denoiser(LATENT_DIM, 8, 4, rng),
        codec=latent_codec.new_codec(20, 8, LATENT_DIM, rng),
        schedule=ldpm.build_schedule(5),
        distill_weight=1.0,
        temperature=2.0,
        episodes=2,
        lr=0.01,
        batch_size=4,
        sample_count=6,
        list_length=5,
        neighbor_count=10,
        gamma=0.5,
    )
    kwargs.update(overrides)
    return fd.VisitSetup(**kwargs)


class TestUpsert:
    def test_insert_then_replace(self):
        kc = make_kc()
        first = fd.HIPair(hash=np.ones(3), vehicle_id=7, upload_time=1.0)
        second = fd.HIPair(hash=np.full(3, 2.0), vehicle_id=7, upload_time=9.0)
        fd.upsert_hi(kc, first)
        assert len(kc.hi) == 1 and kc.hi[7].upload_time == 1.0
        fd.upsert_hi(kc, second)
        assert len(kc.hi) == 1 and kc.hi[7].upload_time == 9.0
        assert np.array_equal(kc.hi[7].hash, np.full(3, 2.0))

    def test_many_distinct_vehicles(self):
        kc = make_kc()
        for vid in range(100):
            fd.upsert_hi(kc, fd.HIPair(hash=np.array([1.0, vid]), vehicle_id=vid,
                                       upload_time=float(vid)))
            fd.upsert_ki(kc, fd.KIPair(knowledge=np.array([2.0, vid]), vehicle_id=vid,
                                       upload_time=float(vid)))
        assert len(kc.hi) == 100 and len(kc.ki) == 100
        assert kc.ki[42].knowledge[1] == 42.0


class TestCosineSimilarity:
    def test_identical(self):
        v = np.array([0.3, -2.0, 5.0])
        assert fd.cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert fd.cosine_similarity(np.array([1.0, 0.0]),
                                    np.array([0.0, 3.0])) == pytest.approx(0.0, abs=1e-12)

    def test_known_value(self):
        got = fd.cosine_similarity(np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0]))
        assert got == pytest.approx(32.0 / np.sqrt(14.0 * 77.0), abs=1e-12)

    def test_zero_vector_raises(self):
        with pytest.raises(ZeroNormError):
            fd.cosine_similarity(np.zeros(3), np.ones(3))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            fd.cosine_similarity(np.ones(3), np.ones(4))


class TestFindNeighbors:
    def test_excludes_self(self):
        kc = seeded_kc(substream(0, "nbr"), range(5))
        got = fd.find_neighbors(kc, 2, count=10, gamma=-1.0)
        assert 2 not in got
        assert sorted(got) == [0, 1, 3, 4]

    def test_infeasible_gamma_empty(self):
        kc = seeded_kc(substream(1, "nbr"), range(5))
        assert fd.find_neighbors(kc, 0, count=10, gamma=1.1) == []

    def test_matches_brute_force(self):
        for trial in range(20):
            kc = seeded_kc(substream(2, "nbr", trial), range(10), with_ki=False)
            own = kc.hi[3].hash
            for count in (1, 3, 10):
                for gamma in (-1.0, 0.0, 0.5):
                    want = sorted(
                        ((fd.cosine_similarity(own, kc.hi[v].hash), v)
                         for v in range(10) if v != 3),
                        key=lambda item: (-item[0], item[1]))
                    want = [v for s, v in want if s >= gamma][:count]
                    assert fd.find_neighbors(kc, 3, count=count, gamma=gamma) == want

    def test_scale_invariance(self):
        kc = seeded_kc(substream(3, "nbr"), range(8), with_ki=False)
        base = fd.find_neighbors(kc, 0, count=5, gamma=0.0)
        scaled = kc.hi[4]
        fd.upsert_hi(kc, fd.HIPair(hash=scaled.hash * 7.0, vehicle_id=4,
                                   upload_time=scaled.upload_time))
        fd.upsert_hi(kc, fd.HIPair(hash=kc.hi[0].hash * 0.01, vehicle_id=0,
                                   upload_time=kc.hi[0].upload_time))
        assert fd.find_neighbors(kc, 0, count=5, gamma=0.0) == base

    def test_ties_break_by_ascending_id(self):
        kc = make_kc()
        shared = np.array([1.0, 1.0])
        for vid in (9, 3, 6):
            fd.upsert_hi(kc, fd.HIPair(hash=shared.copy(), vehicle_id=vid,
                                       upload_time=0.0))
        fd.upsert_hi(kc, fd.HIPair(hash=np.array([1.0, 0.0]), vehicle_id=1,
                                   upload_time=0.0))
        assert fd.find_neighbors(kc, 1, count=3, gamma=0.0) == [3, 6, 9]

    def test_unknown_vehicle_raises(self):
        kc = seeded_kc(substream(4, "nbr"), range(3))
        with pytest.raises(ProtocolError):
            fd.find_neighbors(kc, 77, count=3, gamma=0.0)

    def test_zero_fingerprints_never_qualify(self):
        kc = make_kc()
        fd.upsert_hi(kc, fd.HIPair(hash=np.zeros(2), vehicle_id=0, upload_time=0.0))
        fd.upsert_hi(kc, fd.HIPair(hash=np.ones(2), vehicle_id=1, upload_time=0.0))
        fd.upsert_hi(kc, fd.HIPair(hash=np.zeros(2), vehicle_id=2, upload_time=0.0))
        assert fd.find_neighbors(kc, 0, count=5, gamma=-1.0) == []
        assert fd.find_neighbors(kc, 1, count=5, gamma=-1.0) == []


class TestIntegrateKnowledge:
    def test_single_neighbor_copies(self):
        kc = make_kc()
        fd.upsert_ki(kc, fd.KIPair(knowledge=np.array([1.0, -2.0]), vehicle_id=5,
                                   upload_time=0.0))
        got = fd.integrate_knowledge(kc, [5])
        assert got == pytest.approx(np.array([1.0, -2.0]))

    def test_elementwise_mean(self):
        kc = make_kc()
        for vid, vec in ((0, [0.0, 0.0]), (1, [2.0, 4.0]), (2, [4.0, 2.0])):
            fd.upsert_ki(kc, fd.KIPair(knowledge=np.array(vec), vehicle_id=vid,
                                       upload_time=0.0))
        got = fd.integrate_knowledge(kc, [0, 1, 2])
        assert got == pytest.approx(np.array([2.0, 2.0]))

    def test_missing_entries_skipped(self):
        kc = make_kc()
        fd.upsert_ki(kc, fd.KIPair(knowledge=np.array([6.0]), vehicle_id=1,
                                   upload_time=0.0))
        assert fd.integrate_knowledge(kc, [0, 1, 2]) == pytest.approx(np.array([6.0]))

    def test_none_when_no_knowledge(self):
        kc = make_kc()
        assert fd.integrate_knowledge(kc, [0, 1]) is None
        assert fd.integrate_knowledge(kc, []) is None


class TestMergeKc:
    def test_single_cache_identity(self):
        kc = seeded_kc(substream(0, "merge"), range(6))
        merged = fd.merge_kc([kc])
        assert merged.equals(kc)

    def test_newest_fingerprint_wins(self):
        old = make_kc(rsu_id=0)
        new = make_kc(rsu_id=1)
        fd.upsert_hi(old, fd.HIPair(hash=np.array([1.0]), vehicle_id=7, upload_time=5.0))
        fd.upsert_ki(old, fd.KIPair(knowledge=np.array([10.0]), vehicle_id=7, upload_time=5.0))
        fd.upsert_hi(new, fd.HIPair(hash=np.array([2.0]), vehicle_id=7, upload_time=9.0))
        fd.upsert_ki(new, fd.KIPair(knowledge=np.array([20.0]), vehicle_id=7, upload_time=9.0))
        merged = fd.merge_kc([old, new])
        assert merged.hi[7].hash[0] == 2.0
        assert merged.ki[7].knowledge[0] == 20.0
        assert fd.merge_kc([new, old]).equals(merged)

    def test_timestamp_tie_goes_to_larger_rsu(self):
        a = make_kc(rsu_id=0)
        b = make_kc(rsu_id=3)
        fd.upsert_hi(a, fd.HIPair(hash=np.array([1.0]), vehicle_id=4, upload_time=2.0))
        fd.upsert_hi(b, fd.HIPair(hash=np.array([9.0]), vehicle_id=4, upload_time=2.0))
        merged = fd.merge_kc([b, a])
        assert merged.hi[4].hash[0] == 9.0

    def test_hi_and_ki_travel_together(self):
        # The RSU with the newest fingerprint has no knowledge for the
        # vehicle, so the merged view must not resurrect the stale one.
        old = make_kc(rsu_id=0)
        new = make_kc(rsu_id=1)
        fd.upsert_hi(old, fd.HIPair(hash=np.array([1.0]), vehicle_id=2, upload_time=1.0))
        fd.upsert_ki(old, fd.KIPair(knowledge=np.array([5.0]), vehicle_id=2, upload_time=1.0))
        fd.upsert_hi(new, fd.HIPair(hash=np.array([2.0]), vehicle_id=2, upload_time=8.0))
        merged = fd.merge_kc([old, new])
        assert merged.hi[2].hash[0] == 2.0
        assert 2 not in merged.ki

    def test_idempotent(self):
        kcs = [seeded_kc(substream(1, "merge", i), range(4), rsu_id=i) for i in range(3)]
        once = fd.merge_kc(kcs)
        twice = fd.merge_kc([once, once.copy_with_rsu(-1)])
        assert once.equals(twice)

    def test_empty_rejected(self):
        with pytest.raises(ProtocolError):
            fd.merge_kc([])

    def test_union_of_disjoint_vehicles(self):
        a = seeded_kc(substream(2, "merge"), [0, 1], rsu_id=0)
        b = seeded_kc(substream(3, "merge"), [2, 3], rsu_id=1)
        merged = fd.merge_kc([a, b])
        assert set(merged.hi) == {0, 1, 2, 3}


class TestStandardizer:
    def test_mean_and_scale(self):
        rng = substream(0, "std")
        latents = rng.normal(loc=3.0, scale=2.0, size=(200, 4))
        mu, sd = fd.latent_standardizer(latents)
        assert mu == pytest.approx(latents.mean(axis=0))
        assert sd == pytest.approx(latents.std(axis=0))
        rescaled = (latents - mu) / sd
        assert rescaled.mean(axis=0) == pytest.approx(np.zeros(4), abs=1e-12)
        assert rescaled.std(axis=0) == pytest.approx(np.ones(4))

    def test_degenerate_dimension_keeps_unit_scale(self):
        latents = np.column_stack([np.full(10, 5.0), np.arange(10, dtype=float)])
        mu, sd = fd.latent_standardizer(latents)
        assert mu[0] == 5.0 and sd[0] == 1.0
        assert sd[1] > 1.0


class TestVisit:
    def test_cold_start(self):
        kc = make_kc()
        setup = make_setup(0, np.array([1.0, 0.5, -0.5, 2.0]),
                           substream(0, "visit").normal(size=(8, LATENT_DIM)))
        result = fd.vehicle_visit(kc, setup, now=10.0, residence=30.0,
                                  visit_seconds=5.0,
                                  rng_train=substream(1, "visit"),
                                  rng_sample=substream(2, "visit"))
        assert result.completed
        kinds = [m.kind for m in result.messages]
        assert kinds == [fd.MSG_HI, fd.MSG_KI]
        assert result.rec_list is not None and len(result.rec_list) == 5
        assert result.scores.shape == (20,)
        assert 0 in kc.hi and 0 in kc.ki
        assert kc.ki[0].upload_time == 15.0

    def test_byte_ledger_conserved(self):
        kc = make_kc()
        own_hash = np.array([1.0, 0.5, -0.5, 2.0])
        fd.upsert_hi(kc, fd.HIPair(hash=own_hash + 0.01, vehicle_id=9, upload_time=1.0))
        fd.upsert_ki(kc, fd.KIPair(knowledge=np.ones(LATENT_DIM), vehicle_id=9,
                                   upload_time=1.0))
        carried = np.arange(5)
        setup = make_setup(0, own_hash,
                           substream(3, "visit").normal(size=(8, LATENT_DIM)),
                           carried=carried)
        result = fd.vehicle_visit(kc, setup, now=0.0, residence=30.0,
                                  visit_seconds=5.0,
                                  rng_train=substream(4, "visit"),
                                  rng_sample=substream(5, "visit"))
        kinds = [m.kind for m in result.messages]
        assert kinds == [fd.MSG_REC_LIST, fd.MSG_HI, fd.MSG_KNOWLEDGE_DOWN, fd.MSG_KI]
        want_total = (fd.rec_list_bytes(5) + fd.hi_bytes(LATENT_DIM)
                      + fd.knowledge_bytes(LATENT_DIM) + fd.ki_bytes(LATENT_DIM))
        assert sum(m.nbytes for m in result.messages) == want_total
        for msg in result.messages:
            if msg.kind in fd.UPLINK_KINDS:
                assert msg.src == "veh:0" and msg.dst == "rsu:0"
            else:
                assert msg.src == "rsu:0" and msg.dst == "veh:0"

    def test_replay_is_deterministic(self):
        def run():
            kc = make_kc()
            fd.upsert_hi(kc, fd.HIPair(hash=np.ones(LATENT_DIM), vehicle_id=5,
                                       upload_time=0.5))
            fd.upsert_ki(kc, fd.KIPair(knowledge=np.full(LATENT_DIM, 0.3),
                                       vehicle_id=5, upload_time=0.5))
            setup = make_setup(1, np.ones(LATENT_DIM) * 0.9,
                               substream(6, "visit").normal(size=(10, LATENT_DIM)))
            return fd.vehicle_visit(kc, setup, now=2.0, residence=20.0,
                                    visit_seconds=4.0,
                                    rng_train=substream(7, "visit"),
                                    rng_sample=substream(8, "visit"))

        a, b = run(), run()
        assert a.messages == b.messages
        assert a.scores.tobytes() == b.scores.tobytes()
        assert np.array_equal(a.rec_list, b.rec_list)
        assert a.losses == b.losses

    def test_abort_on_short_residence(self):
        kc = make_kc()
        setup = make_setup(2, np.ones(LATENT_DIM),
                           substream(9, "visit").normal(size=(8, LATENT_DIM)),
                           carried=np.arange(3))
        result = fd.vehicle_visit(kc, setup, now=0.0, residence=2.0,
                                  visit_seconds=5.0,
                                  rng_train=substream(10, "visit"),
                                  rng_sample=substream(11, "visit"))
        assert not result.completed
        assert [m.kind for m in result.messages] == [fd.MSG_REC_LIST, fd.MSG_HI]
        assert result.rec_list is None and result.scores is None
        assert 2 in kc.hi and 2 not in kc.ki


class TestByteSizes:
    def test_formulas(self):
        assert fd.hi_bytes(16) == 4 + 4 * 16 + 8
        assert fd.ki_bytes(16) == 4 + 4 * 16 + 8
        assert fd.knowledge_bytes(16) == 64
        assert fd.rec_list_bytes(500) == 2000
        assert fd.model_bytes(770_000) == 3_080_000
