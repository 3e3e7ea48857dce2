import socket
import threading

import numpy as np
import pytest

from bbtune import wire
from bbtune.model import COMPACT, ModelConfig, build_model, layer_hidden_stats
from bbtune.service import (InProcessEvalApi, RemoteEvalApi, TransportError, _initial_prompt, handle_request,
                            read_frame, request_offsets, serve)
from bbtune.tasks import make_few_shot_task
from bbtune.wire import InferenceRequest, PromptKind, ProjectionSpec


@pytest.fixture(scope="module")
def model():
    return build_model(COMPACT)


@pytest.fixture(scope="module")
def server(model):
    with serve(model) as srv:
        yield srv


@pytest.fixture(scope="module")
def task():
    return make_few_shot_task(n_classes=3, k=4, seed=2)


def _request(model, task, kind, rng):
    tr = task.train
    L, n_p, H = model.n_layers, model.prompt_len, model.hidden
    if kind == PromptKind.NONE:
        prompt, specs = np.zeros((0, 0, 0)), ()
    elif kind == PromptKind.SHALLOW:
        prompt, specs = rng.standard_normal((1, n_p, H)) * 0.3, ()
    elif kind == PromptKind.DEEP:
        prompt, specs = rng.standard_normal((L, n_p, H)) * 0.3, ()
    else:
        layers = 1 if kind == PromptKind.SHALLOW_SUBSPACE else L
        prompt = rng.standard_normal((layers, 1, 10))
        specs = tuple(ProjectionSpec("normal", j, 0.05) for j in range(layers))
    return InferenceRequest(tr.input_ids, tr.attention_mask, tr.mask_pos, task.label_ids, kind,
                            np.asarray(prompt, np.float32), specs, prompt_seed=3)


@pytest.mark.parametrize("kind", list(PromptKind))
def test_remote_matches_in_process(model, server, task, kind):
    rng = np.random.default_rng(int(kind))
    req = _request(model, task, kind, rng)
    local = InProcessEvalApi(model).evaluate(req)
    with RemoteEvalApi(server.address) as api:
        remote = api.evaluate(req)
    assert remote.dtype == np.float32
    assert np.allclose(local, remote, atol=1e-6, rtol=0)


def test_subspace_and_projected_uploads_agree(model, task):
    rng = np.random.default_rng(0)
    req = _request(model, task, PromptKind.DEEP_SUBSPACE, rng)
    offsets = request_offsets(model, req)
    flat = InferenceRequest(req.input_ids, req.attention_mask, req.mask_pos, req.label_ids, PromptKind.DEEP,
                            offsets.astype(np.float32), (), req.prompt_seed)
    assert np.allclose(handle_request(model, req), handle_request(model, flat), atol=1e-5)


def test_concurrent_clients(model, server, task):
    rng = np.random.default_rng(1)
    base = _request(model, task, PromptKind.DEEP, rng)
    expected = handle_request(model, base)
    errors, counts = [], []

    def client(i):
        try:
            with RemoteEvalApi(server.address) as api:
                got = 0
                for _ in range(25):
                    outs = api.evaluate_many([base] * 4)
                    for out in outs:
                        assert np.array_equal(out, expected)
                    got += len(outs)
                counts.append(got)
        except Exception as e:  # surfaced below
            errors.append(e)

    threads = [threading.Thread(target=client, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert counts == [100] * 4


def _connect(server):
    host, port = server.address.rsplit(":", 1)
    return socket.create_connection((host, int(port)))


def test_request_ids_are_paired(model, server, task):
    req = _request(model, task, PromptKind.NONE, np.random.default_rng(0))
    with _connect(server) as s:
        for rid in (5, 77, 2**32 - 1):
            req.request_id = rid
            s.sendall(wire.frame(wire.encode_request(req)))
        ids = [wire.decode_response(read_frame(s)).request_id for _ in range(3)]
    assert ids == [5, 77, 2**32 - 1]


def test_errors_keep_connection_alive(model, server, task):
    good = _request(model, task, PromptKind.NONE, np.random.default_rng(0))
    good.request_id = 9
    with _connect(server) as s:
        s.sendall(wire.frame(b"XYZ\x01" + bytes(8)))
        err = wire.decode_error(read_frame(s))
        assert err.code == wire.ERR_PROTOCOL and "BadMagic" in err.message
        s.sendall(wire.frame(wire.encode_request(good)[:-3]))
        assert "Truncated" in wire.decode_error(read_frame(s)).message
        bad = InferenceRequest(good.input_ids, good.attention_mask, good.mask_pos, [4000], request_id=3)
        s.sendall(wire.frame(wire.encode_request(bad)))
        err = wire.decode_error(read_frame(s))
        assert err.code == wire.ERR_INVALID and err.request_id == 3
        s.sendall(wire.frame(wire.encode_request(good)))
        assert wire.decode_response(read_frame(s)).request_id == 9


def test_remote_error_surfaces(model, server, task):
    req = _request(model, task, PromptKind.SHALLOW, np.random.default_rng(0))
    req.prompt = np.zeros((1, 2, 2), np.float32)
    with RemoteEvalApi(server.address) as api:
        with pytest.raises(wire.RemoteError):
            api.evaluate(req)


class CountingApi(RemoteEvalApi):
    """Sums encoded frame lengths independently of the ledger."""

    sent = 0

    def _exchange(self, messages):
        self.sent += sum(len(wire.frame(m)) for m in messages)
        return super()._exchange(messages)


def test_ledger_exactness(model, task):
    with serve(model) as srv:
        reqs = [_request(model, task, k, np.random.default_rng(int(k))) for k in PromptKind]
        with CountingApi(srv.address) as api:
            outs = api.evaluate_many(reqs)
            down = sum(wire.response_size(*o.shape) for o in outs)
            assert api.ledger.upload == api.sent
            assert api.ledger.download == down
            assert srv.ledger.snapshot() == {"upload": api.sent, "download": down, "requests": len(reqs)}
        local = InProcessEvalApi(model)
        local.evaluate_many(reqs)
        assert local.ledger.upload == api.sent
        assert local.ledger.download == down


def test_ledger_for_sst2_shaped_request():
    model = build_model(ModelConfig())  # n_p=10, H=64 leaves room for 47 tokens
    req = InferenceRequest(np.full((32, 47), 7), np.ones((32, 47), bool), np.full(32, 46), [4, 5],
                           PromptKind.SHALLOW_SUBSPACE, np.zeros((1, 1, 500), np.float32),
                           (ProjectionSpec("normal", 0, 0.01),))
    with serve(model) as srv:
        with RemoteEvalApi(srv.address) as api:
            api.evaluate(req)
        sizes = wire.sizes_of(req)
        assert srv.ledger.upload == 3008 + 1504 + 2000 + sizes.overhead
        assert sizes.overhead == 4 + 44 + 64 + 4 + 16
        assert srv.ledger.download == 4 + 20 + 256


def test_stats_and_info_over_the_wire(model, server, task):
    tr = task.train
    with RemoteEvalApi(server.address) as api:
        info = api.info()
        stats = api.layer_stats(tr.input_ids, tr.attention_mask, prompt_seed=4)
    assert (info.hidden, info.layers, info.prompt_len) == (model.hidden, model.n_layers, model.prompt_len)
    assert stats == layer_hidden_stats(model, tr.input_ids, tr.attention_mask, _initial_prompt(model, 4))
    assert stats == InProcessEvalApi(model).layer_stats(tr.input_ids, tr.attention_mask, 4)


def test_max_batch(model, task):
    with serve(model, max_batch=2) as srv:
        with RemoteEvalApi(srv.address) as api:
            with pytest.raises(wire.RemoteError, match="limit"):
                api.evaluate(_request(model, task, PromptKind.NONE, np.random.default_rng(0)))


def test_unreachable_server_raises_transport_error(model, task):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    api = RemoteEvalApi(f"127.0.0.1:{port}", retries=1, backoff=0.0)
    with pytest.raises(TransportError):
        api.evaluate(_request(model, task, PromptKind.NONE, np.random.default_rng(0)))


def test_calls_are_metered_by_purpose(model, task):
    api = InProcessEvalApi(model)
    req = _request(model, task, PromptKind.NONE, np.random.default_rng(0))
    api.evaluate(req)
    api.evaluate_many([req, req], "dev")
    assert api.calls["train"] == 1 and api.calls["dev"] == 2
    assert api.ledger.requests == 3
