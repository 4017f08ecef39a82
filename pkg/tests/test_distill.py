"""Map buffer protocol, uncertainty-ranked selection, distillation loss."""

import numpy as np
import pytest

import fedsim.autodiff as ad
import fedsim.distill as dist
from fedsim.evidential import ContractError

RNG = np.random.default_rng(99)


def make_map(client, cls, unc, *, shape=(4, 4), sample=0, seed=None):
    rng = np.random.default_rng(seed if seed is not None else RNG.integers(1 << 30))
    return dist.RolloutMap(
        grid=rng.uniform(0, 1, size=shape),
        client_id=client,
        class_id=cls,
        uncertainty=unc,
        sample_id=sample,
    )


class TestRolloutMap:
    def test_grid_frozen(self):
        m = make_map(0, 0, 0.5)
        assert not m.grid.flags.writeable
        with pytest.raises(ValueError):
            m.grid[0, 0] = 2.0

    @pytest.mark.parametrize(
        "kw",
        [
            dict(grid=np.zeros(4)),  # not 2-d
            dict(grid=np.full((2, 2), 1.5)),  # above 1
            dict(grid=np.full((2, 2), -0.1)),  # below 0
            dict(uncertainty=1.2),
            dict(uncertainty=-0.1),
            dict(client_id=-1),
            dict(class_id=-2),
            dict(sample_id=-1),
        ],
    )
    def test_contracts(self, kw):
        base = dict(
            grid=np.zeros((2, 2)), client_id=0, class_id=0,
            uncertainty=0.5, sample_id=0,
        )
        base.update(kw)
        with pytest.raises(ContractError):
            dist.RolloutMap(**base)

    def test_nonfinite_rejected(self):
        grid = np.zeros((2, 2))
        grid[0, 0] = np.nan
        with pytest.raises(ContractError):
            dist.RolloutMap(grid, 0, 0, 0.5, 0)


class TestBufferProtocol:
    def _buffer(self):
        return dist.AttentionBuffer(num_clients=3, num_classes=2, capacity_per_class=2)

    def test_fresh_state(self):
        buf = self._buffer()
        assert buf.version == 0 and buf.phase == "training"
        assert len(buf) == 0
        assert buf.capacity_total == 3 * 2 * 2

    def test_publish_cycle(self):
        buf = self._buffer()
        buf.begin_publish(1)
        buf.publish(0, [make_map(0, 0, 0.3), make_map(0, 1, 0.6)])
        buf.publish(1, [make_map(1, 0, 0.2)])
        buf.commit(1)
        assert buf.version == 1 and buf.phase == "training"
        assert len(buf) == 3
        assert buf.entry_counts() == {(0, 0): 1, (0, 1): 1, (1, 0): 1}

    def test_sequencing_errors(self):
        buf = self._buffer()
        with pytest.raises(dist.ProtocolError):
            buf.publish(0, [make_map(0, 0, 0.5)])  # before begin
        with pytest.raises(dist.ProtocolError):
            buf.commit(1)  # before begin
        with pytest.raises(dist.ProtocolError):
            buf.begin_publish(2)  # skips round 1
        buf.begin_publish(1)
        with pytest.raises(dist.ProtocolError):
            buf.begin_publish(1)  # already open
        with pytest.raises(dist.ProtocolError):
            buf.commit(2)  # round mismatch
        buf.commit(1)

    def test_publish_validation(self):
        buf = self._buffer()
        buf.begin_publish(1)
        with pytest.raises(ContractError):
            buf.publish(9, [make_map(9, 0, 0.5)])  # client out of range
        with pytest.raises(ContractError):
            buf.publish(0, [make_map(1, 0, 0.5)])  # impersonation
        with pytest.raises(ContractError):
            buf.publish(0, [make_map(0, 5, 0.5)])  # class out of range
        with pytest.raises(ContractError):
            buf.publish(0, [make_map(0, 0, 0.5) for _ in range(3)])  # capacity
        buf.publish(0, [make_map(0, 0, 0.5)])
        with pytest.raises(ContractError):
            buf.publish(1, [make_map(1, 0, 0.5, shape=(3, 3))])  # shape drift
        buf.commit(1)

    def test_republish_replaces(self):
        buf = self._buffer()
        buf.begin_publish(1)
        buf.publish(0, [make_map(0, 0, 0.9, sample=1)])
        buf.commit(1)
        buf.begin_publish(2)
        buf.publish(0, [make_map(0, 0, 0.1, sample=2), make_map(0, 0, 0.2, sample=3)])
        buf.commit(2)
        entries = buf.entries_for_class(0)
        assert len(entries) == 2
        assert {m.sample_id for m in entries} == {2, 3}

    def test_entries_ordered_and_excludable(self):
        buf = self._buffer()
        buf.begin_publish(1)
        buf.publish(2, [make_map(2, 0, 0.3)])
        buf.publish(0, [make_map(0, 0, 0.5)])
        buf.publish(1, [make_map(1, 1, 0.4)])
        buf.commit(1)
        got = buf.entries_for_class(0)
        assert [m.client_id for m in got] == [0, 2]
        assert [m.client_id for m in buf.entries_for_class(0, exclude_client=0)] == [2]
        assert buf.entries_for_class(1, exclude_client=1) == ()

    def test_bad_dimensions(self):
        with pytest.raises(ContractError):
            dist.AttentionBuffer(0, 2, 1)


class TestSelection:
    def test_brute_force_oracle(self):
        rng = np.random.default_rng(17)
        scored = [
            (int(rng.integers(0, 3)), float(rng.uniform()), int(rng.integers(0, 1000)))
            for _ in range(200)
        ]
        cap = 4
        got = dist.select_for_sharing(scored, cap)
        for k in {c for c, _, _ in scored}:
            pool = sorted(
                [(u, s) for c, u, s in scored if c == k]
            )[:cap]
            assert got[k] == tuple(s for _, s in pool)

    def test_lowest_uncertainty_wins(self):
        scored = [(0, 0.9, 1), (0, 0.1, 2), (0, 0.5, 3)]
        assert dist.select_for_sharing(scored, 2) == {0: (2, 3)}

    def test_tie_breaks_on_sample_id(self):
        scored = [(0, 0.5, 9), (0, 0.5, 3), (0, 0.5, 7)]
        assert dist.select_for_sharing(scored, 2) == {0: (3, 7)}

    def test_capacity_bound(self):
        scored = [(1, 0.2, 0)]
        assert dist.select_for_sharing(scored, 5) == {1: (0,)}
        with pytest.raises(ContractError):
            dist.select_for_sharing(scored, 0)

    def test_random_baseline_properties(self):
        scored = [(0, 0.1 * i, i) for i in range(10)] + [(1, 0.5, 42)]
        rng = np.random.default_rng(5)
        got = dist.random_selection_baseline(scored, 4, rng)
        assert len(got[0]) == 4 and len(set(got[0])) == 4
        assert set(got[0]) <= set(range(10))
        assert got[1] == (42,)
        rng2 = np.random.default_rng(5)
        assert dist.random_selection_baseline(scored, 4, rng2) == got

    def test_random_baseline_differs_from_ranked(self):
        # over many draws the random picker must sometimes take
        # higher-uncertainty ids than the ranked one would
        scored = [(0, i / 20, i) for i in range(20)]
        ranked = dist.select_for_sharing(scored, 3)[0]
        rng = np.random.default_rng(0)
        draws = {
            dist.random_selection_baseline(scored, 3, rng)[0] for _ in range(30)
        }
        assert any(set(d) != set(ranked) for d in draws)


class TestKdLoss:
    def _small_buffer(self, grids_by_client, cls=0, capacity=2):
        n = max(grids_by_client) + 1
        buf = dist.AttentionBuffer(n, 2, capacity)
        buf.begin_publish(1)
        for c, grids in grids_by_client.items():
            buf.publish(
                c,
                [
                    dist.RolloutMap(g, c, cls, 0.5, i)
                    for i, g in enumerate(grids)
                ],
            )
        buf.commit(1)
        return buf

    def test_single_pixel_oracle(self):
        # 1x1 grids make the sum-of-squares arithmetic visible by hand
        buf = self._small_buffer(
            {1: [np.array([[0.2]])], 2: [np.array([[0.9]])]}, capacity=3
        )
        rollout = ad.Tensor(np.array([[0.5]]), requires_grad=True)
        loss = dist.kd_loss(rollout, buf, client_id=0, class_id=0)
        want = ((0.5 - 0.2) ** 2 + (0.5 - 0.9) ** 2) / 3
        assert loss.item() == pytest.approx(want, abs=1e-15)
        ad.backward(loss)
        grad_want = (2 * (0.5 - 0.2) + 2 * (0.5 - 0.9)) / 3
        assert rollout.grad[0, 0] == pytest.approx(grad_want, abs=1e-15)

    def test_own_maps_excluded(self):
        g = np.full((2, 2), 0.3)
        buf = self._small_buffer({0: [g]}, capacity=2)
        loss = dist.kd_loss(ad.Tensor(np.ones((2, 2))), buf, 0, 0)
        assert loss.item() == 0.0

    def test_empty_class_is_zero(self):
        buf = dist.AttentionBuffer(2, 2, 1)
        assert dist.kd_loss(ad.Tensor(np.ones((2, 2))), buf, 0, 1).item() == 0.0

    def test_shape_mismatch(self):
        buf = self._small_buffer({1: [np.zeros((2, 2))]})
        with pytest.raises(ContractError):
            dist.kd_loss(ad.Tensor(np.zeros((3, 3))), buf, 0, 0)

    def test_divides_by_capacity_not_count(self):
        # one stored map, capacity 4: the denominator stays 4
        buf = self._small_buffer({1: [np.zeros((1, 1))]}, capacity=4)
        loss = dist.kd_loss(ad.Tensor(np.array([[1.0]])), buf, 0, 0)
        assert loss.item() == pytest.approx(1.0 / 4)


class TestKdBatch:
    def _populated(self, seed=0):
        rng = np.random.default_rng(seed)
        buf = dist.AttentionBuffer(3, 2, 2)
        buf.begin_publish(1)
        for c in range(3):
            maps = []
            for k in range(2):
                for i in range(rng.integers(1, 3)):
                    maps.append(
                        dist.RolloutMap(
                            rng.uniform(0, 1, (4, 4)), c, k, 0.5, i
                        )
                    )
            buf.publish(c, maps)
        buf.commit(1)
        return buf, rng

    def test_matches_per_sample_loss(self):
        buf, rng = self._populated()
        labels = np.array([0, 1, 0, 1, 1])
        rolls = rng.uniform(0, 1, size=(5, 4, 4))
        consts = dist.kd_constants(buf, client_id=1, grid_shape=(4, 4))
        batch = dist.kd_loss_batch(ad.Tensor(rolls), labels, consts).item()
        singles = [
            dist.kd_loss(ad.Tensor(rolls[i]), buf, 1, int(labels[i])).item()
            for i in range(5)
        ]
        assert batch == pytest.approx(np.mean(singles), rel=1e-12)

    def test_gradients_match_per_sample(self):
        buf, rng = self._populated(seed=4)
        labels = np.array([1, 0])
        rolls = rng.uniform(0, 1, size=(2, 4, 4))
        leaf = ad.Tensor(rolls, requires_grad=True)
        consts = dist.kd_constants(buf, 0, (4, 4))
        ad.backward(dist.kd_loss_batch(leaf, labels, consts))
        for i in range(2):
            single_leaf = ad.Tensor(rolls[i], requires_grad=True)
            ad.backward(dist.kd_loss(single_leaf, buf, 0, int(labels[i])))
            np.testing.assert_allclose(
                leaf.grad[i], single_leaf.grad / 2, rtol=1e-12, atol=1e-15
            )

    def test_no_foreign_maps(self):
        buf = dist.AttentionBuffer(2, 2, 1)
        consts = dist.kd_constants(buf, 0, (4, 4))
        assert not consts.has_foreign
        out = dist.kd_loss_batch(ad.Tensor(np.zeros((2, 4, 4))), [0, 1], consts)
        assert out.item() == 0.0

    def test_constants_exclude_own_maps(self):
        buf, _ = self._populated()
        consts_all = dist.kd_constants(buf, client_id=-1, grid_shape=(4, 4))
        consts_c0 = dist.kd_constants(buf, client_id=0, grid_shape=(4, 4))
        assert consts_c0.count.sum() < consts_all.count.sum()

    def test_shape_contract(self):
        buf, _ = self._populated()
        consts = dist.kd_constants(buf, 0, (4, 4))
        with pytest.raises(ContractError):
            dist.kd_loss_batch(ad.Tensor(np.zeros((2, 3, 3))), [0, 0], consts)


class TestCombinedLoss:
    def test_weighted_sum(self):
        out = dist.combined_loss(ad.Tensor(2.0), ad.Tensor(3.0), 0.5)
        assert out.item() == pytest.approx(3.5)

    def test_zero_lambda_drops_kd(self):
        out = dist.combined_loss(ad.Tensor(2.0), ad.Tensor(99.0), 0.0)
        assert out.item() == 2.0

    def test_negative_lambda_rejected(self):
        with pytest.raises(ContractError):
            dist.combined_loss(ad.Tensor(1.0), ad.Tensor(1.0), -0.1)


class TestPgmAndDumps:
    def test_roundtrip_within_quantization(self, tmp_path):
        grid = np.random.default_rng(0).uniform(0, 1, size=(16, 16))
        path = tmp_path / "m.pgm"
        dist.write_pgm(path, grid)
        back = dist.read_pgm(path)
        assert back.shape == grid.shape
        # 16-bit quantization: half a step of 1/65535
        np.testing.assert_allclose(back, grid, atol=0.5 / 65535 + 1e-12)

    def test_header_format(self, tmp_path):
        path = tmp_path / "m.pgm"
        dist.write_pgm(path, np.zeros((3, 5)))
        head = path.read_bytes()[:40]
        assert head.startswith(b"P5\n5 3\n65535\n")

    def test_write_contracts(self, tmp_path):
        with pytest.raises(ContractError):
            dist.write_pgm(tmp_path / "x.pgm", np.zeros(4))
        with pytest.raises(ContractError):
            dist.write_pgm(tmp_path / "x.pgm", np.full((2, 2), 1.1))

    def test_read_rejects_foreign_files(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
        with pytest.raises(ContractError):
            dist.read_pgm(p)
        p8 = tmp_path / "bad8.pgm"
        p8.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(ContractError):
            dist.read_pgm(p8)

    def test_dump_buffer_layout(self, tmp_path):
        buf = dist.AttentionBuffer(2, 2, 2)
        buf.begin_publish(1)
        g0 = np.random.default_rng(1).uniform(0, 1, (4, 4))
        buf.publish(0, [dist.RolloutMap(g0, 0, 1, 0.25, 7)])
        buf.publish(1, [dist.RolloutMap(np.zeros((4, 4)), 1, 0, 0.75, 3)])
        buf.commit(1)
        dist.dump_buffer(buf, tmp_path, 1)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == [
            "round1_c0_k1_m0.pgm",
            "round1_c1_k0_m0.pgm",
            "round1_manifest.txt",
        ]
        manifest = (tmp_path / "round1_manifest.txt").read_text().splitlines()
        assert manifest == ["0 1 0 0.25", "1 0 0 0.75"]
        back = dist.read_pgm(tmp_path / "round1_c0_k1_m0.pgm")
        np.testing.assert_allclose(back, g0, atol=0.5 / 65535 + 1e-12)
