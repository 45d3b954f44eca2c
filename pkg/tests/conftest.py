import numpy as np
import pytest

from flowkv import ModelConfig, PolicyConfig, init_model


def pools_token_identical(a, b, check_counts=False):
    """Token-level pool equality: kinds, provenance, and KV bits."""
    if len(a.segments) != len(b.segments):
        return False
    for sa, sb in zip(a.segments, b.segments):
        if sa.kind != sb.kind:
            return False
        if check_counts and sa.compression_count != sb.compression_count:
            return False
        if not (
            np.array_equal(sa.origin_indices, sb.origin_indices)
            and np.array_equal(sa.token_ids, sb.token_ids)
            and np.array_equal(sa.keys, sb.keys)
            and np.array_equal(sa.values, sb.values)
        ):
            return False
    return True


TEST_MODEL_CFG = ModelConfig(vocab=96, layers=2, heads=2, head_dim=8, max_seq=640, seed=5)


@pytest.fixture(scope="session")
def small_model():
    return init_model(TEST_MODEL_CFG)


ALL_POLICIES = [
    PolicyConfig(policy_kind="streaming", sink_count=4),
    PolicyConfig(policy_kind="snapkv", obs_window=8, pool_kernel=3),
    PolicyConfig(policy_kind="chunkkv", obs_window=8, chunk_size=4),
    PolicyConfig(policy_kind="expected_attention", obs_window=8),
    PolicyConfig(policy_kind="h2o"),
    PolicyConfig(policy_kind="random", seed=99),
]
