import numpy as np
import pytest

from she_core.errors import ValidationError
from she_core.fk_engine import sample_ensemble, sample_path
from she_core.markov_chain import (chain_records, chunk_path, estimate_a_msd, estimate_a_regen, estimate_kappa,
                                   hitting_table, pair_hitting_probability, pair_regenerations, regenerations,
                                   truncation_bound)


@pytest.fixture
def long_path(streams):
    return sample_path(np.zeros(3), 3.5, 0.0, 0.05, streams.generator('chain', 0))


class TestChunks:
    def test_head_and_unit_chunks(self, long_path):
        chain = chunk_path(long_path)
        assert chain.boundaries == pytest.approx((0.0, 0.5, 1.5, 2.5, 3.5))
        assert chain.head == pytest.approx(0.5)
        assert chain.n_chunks == 4
        assert all(np.array_equal(c[0], np.zeros(3)) for c in chain.chunks)

    def test_reassemble_recovers_path(self, long_path):
        chain = chunk_path(long_path)
        assert np.allclose(chain.reassemble(), long_path.forward)
        assert np.allclose(chain.increments().sum(axis=0), long_path.forward[-1])

    def test_integer_horizon_has_no_head(self, long_path):
        chain = chunk_path(long_path, 3.0)
        assert chain.boundaries == pytest.approx((0.0, 1.0, 2.0, 3.0))

    def test_bad_horizons(self, long_path):
        with pytest.raises(ValidationError):
            chunk_path(long_path, 0.5)
        with pytest.raises(ValidationError):
            chunk_path(long_path, 5.0)


class TestRegenerations:
    def test_white_regenerates_every_chunk(self, long_path):
        record = regenerations(chunk_path(long_path), 'white')
        assert record.flags.all()
        assert record.times == pytest.approx([0.0, 0.5, 1.5, 2.5, 3.5])
        assert not record.approximate
        assert np.allclose(record.increments.sum(axis=0), long_path.forward[-1])

    def test_colored_needs_rng(self, long_path):
        with pytest.raises(ValidationError):
            regenerations(chunk_path(long_path), 'colored')
        with pytest.raises(ValidationError):
            regenerations(chunk_path(long_path), 'other')

    def test_colored_flags_are_marked_approximate(self, long_path, streams):
        record = regenerations(chunk_path(long_path), 'colored', streams.generator('flags', 0), 0.5)
        assert record.approximate
        assert record.n_increments == int(record.flags.sum())

    def test_pair_regenerations(self, streams):
        a = chunk_path(sample_path(np.zeros(3), 4.0, 0.0, 0.05, streams.generator('pair', 0)))
        b = chunk_path(sample_path(np.ones(3), 4.0, 0.0, 0.05, streams.generator('pair', 1)))
        record = pair_regenerations(a, b, 'white')
        assert record.flags.all()
        assert record.increments_a.shape == record.increments_b.shape == (4, 3)
        short = chunk_path(sample_path(np.zeros(3), 3.0, 0.0, 0.05, streams.generator('pair', 2)))
        with pytest.raises(ValidationError):
            pair_regenerations(a, short, 'white')


class TestDiffusivity:
    def test_regeneration_estimate_without_potential(self, streams):
        paths = sample_ensemble(200, np.zeros(3), 16.0, 0.0, 0.05, streams.stage('regen'))
        records = chain_records(paths, 16.0, 'white', streams.stage('flags'))
        result = estimate_a_regen(records)
        assert result.kappa1 == 1.0
        assert result.estimate.within(1.0, k=5.0)
        assert result.matrix.shape == (3, 3)
        assert np.allclose(result.matrix, result.matrix.T)

    def test_displacement_estimate_without_potential(self, small_spec, streams):
        estimate = estimate_a_msd(small_spec, 0.0, 0.0, 8.0, 2000, streams)
        assert estimate.within(1.0, k=5.0)

    def test_displacement_needs_long_horizon(self, small_spec, streams):
        with pytest.raises(ValidationError):
            estimate_a_msd(small_spec, 0.0, 0.0, 4.0, 10, streams)

    def test_kappa_white(self, streams):
        paths = sample_ensemble(100, np.zeros(3), 16.0, 0.0, 0.05, streams.stage('kappa'))
        result = estimate_kappa(chain_records(paths, 16.0, 'white', streams.stage('flags')))
        assert result.kappa1.value == 1.0
        assert result.kappa2.value == 1.0

    def test_kappa_colored(self, streams):
        paths = sample_ensemble(100, np.zeros(3), 16.0, 0.0, 0.05, streams.stage('kappa'))
        result = estimate_kappa(chain_records(paths, 16.0, 'colored', streams.stage('flags'), kappa1=0.5))
        assert result.kappa1.within(0.5, k=4.0)


class TestHitting:
    def test_coincident_start_always_hits(self, streams):
        result = pair_hitting_probability(np.zeros(3), np.zeros(3), 0.0, 2.0, 50, 'white', streams)
        assert result.estimate.value == 1.0
        assert result.separation == 0.0

    def test_probability_decreases_with_separation(self, streams):
        near = pair_hitting_probability(np.zeros(3), np.array([2.0, 0, 0]), 0.0, 8.0, 400, 'white', streams)
        far = pair_hitting_probability(np.zeros(3), np.array([6.0, 0, 0]), 0.0, 8.0, 400, 'white', streams)
        assert near.estimate.value > far.estimate.value
        assert near.truncation_bound == pytest.approx((np.pi * 8.0) ** -0.5)

    def test_table_rows(self, streams):
        rows = hitting_table((2.0, 4.0), (0.0, 1.0), 2.0, 20, 'white', streams)
        assert len(rows) == 4
        assert {row.to_row()['separation'] for row in rows} == {2.0, 4.0}
        assert all(0.0 <= row.estimate.value <= 1.0 for row in rows)

    def test_table_reports_progress(self, streams):
        seen = []
        hitting_table((2.0, 4.0), (0.0, 1.0), 2.0, 10, 'white', streams,
                      progress=lambda message, fraction: seen.append((message, fraction)))
        assert [fraction for _, fraction in seen] == [0.25, 0.5, 0.75, 1.0]
        assert seen[0][0] == 'r=2.0, s=0.0'

    def test_truncation_bound_constants(self):
        assert truncation_bound(64.0, 3) == pytest.approx(1.0 / np.sqrt(64.0 * np.pi))
        assert truncation_bound(10.0, 4) == pytest.approx(1.0 / 40.0)
        assert truncation_bound(64.0, 3, radius=2.0) == pytest.approx(2.0 * truncation_bound(64.0, 3))
        # горизонт из configs/hitting.env: хвост меньше 10% от P(16) ≥ 0.04
        assert truncation_bound(32768.0, 3) < 0.1 * 0.04

    def test_colored_tilted_pairs(self, small_spec, streams):
        result = pair_hitting_probability(np.zeros(3), np.array([1.5, 0, 0]), 0.0, 2.0, 40, 'colored',
                                          streams, beta=0.2, covariance=small_spec.covariance)
        assert 0.0 <= result.estimate.value <= 1.0

    def test_invalid_requests(self, streams):
        with pytest.raises(ValidationError):
            pair_hitting_probability(np.zeros(3), np.ones(3), 0.0, 2.0, 5, 'grey', streams)
        with pytest.raises(ValidationError):
            pair_hitting_probability(np.zeros(3), np.ones(3), 0.0, 2.0, 5, 'colored', streams, beta=0.2)
