import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedtl import federated, layers
from fedtl.errors import DimensionError, FormatError, RoundAborted
from fedtl.federated import Client, FederatedConfig, RoundMessage, Server
from fedtl.losses import LossWeights
from fedtl.optim import Schedule

from conftest import separable_set


def make_clients(n=2, per_class=8, chains=None, seed=0):
    out = []
    for i in range(n):
        trials = separable_set(seed=seed + i + 1, trials_per_class=per_class)
        chain = chains[i] if chains else (8, 4)
        params = layers.init_params(chain, 2, seed=seed + 10 * i)
        out.append(Client(f"c{i}", trials.covariances(), trials.labels, params, Schedule()))
    return out


def state_bytes(clients, server):
    blobs = [a.tobytes() for a in server.shared] + [server.round]
    for c in clients:
        blobs += [layer.weight.tobytes() for layer in c.params.bimaps]
        blobs += [a.tobytes() for a in c.params.shared()]
        blobs.append(c.epoch)
    return blobs


class TestFedAvg:
    def test_examples(self):
        out = federated.fedavg({"a": [np.array([1.0, 2.0])], "b": [np.array([3.0, 4.0])]})
        np.testing.assert_array_equal(out[0], [2.0, 3.0])
        single = [np.array([[0.25, -1.5]])]
        assert federated.fedavg({"only": single})[0].tobytes() == single[0].tobytes()

    def test_identical_uploads_exact(self, rng):
        w = [rng.standard_normal((16, 2)), rng.standard_normal(2)]
        out = federated.fedavg({str(i): w for i in range(7)})
        for a, b in zip(out, w):
            assert a.tobytes() == b.tobytes()

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)), st.randoms(use_true_random=False))
    def test_order_invariant(self, rows, rnd):
        uploads = {f"c{i}": [rows[i]] for i in range(4)}
        keys = list(uploads)
        rnd.shuffle(keys)
        shuffled = {k: uploads[k] for k in keys}
        assert federated.fedavg(uploads)[0].tobytes() == federated.fedavg(shuffled)[0].tobytes()
        np.testing.assert_allclose(federated.fedavg(uploads)[0], rows.mean(axis=0), rtol=1e-12, atol=1e-9)

    def test_errors(self):
        with pytest.raises(ValueError):
            federated.fedavg({})
        with pytest.raises(DimensionError):
            federated.fedavg({"a": [np.zeros(2)], "b": [np.zeros(3)]})
        with pytest.raises(DimensionError):
            federated.fedavg({"a": [np.zeros(2)], "b": [np.zeros(2), np.zeros(1)]})


class TestWireFormat:
    def test_roundtrip_bitwise(self, rng):
        msg = RoundMessage("upload", 7, (rng.standard_normal((16, 2)), rng.standard_normal(2)), "subject-ü")
        back = federated.transmit(msg)
        assert (back.kind, back.round, back.client_id) == ("upload", 7, "subject-ü")
        for a, b in zip(msg.tensors, back.tensors):
            assert a.tobytes() == b.tobytes() and a.shape == b.shape

    def test_header_layout(self):
        buf = federated.encode(RoundMessage("broadcast", 3, (np.array([1.5]),)))
        assert buf[:4] == b"FTLM"
        assert struct.unpack_from("<HBI", buf, 4) == (1, 0, 3)
        assert buf[-8:] == struct.pack("<d", 1.5)

    def test_tensors_read_only(self):
        msg = RoundMessage("broadcast", 0, (np.zeros(2),))
        with pytest.raises(ValueError):
            msg.tensors[0][0] = 1.0

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:-3],
        lambda b: b + b"\x00",
        lambda b: b[:4] + struct.pack("<H", 9) + b[6:],
        lambda b: b[:6] + bytes([9]) + b[7:],
    ])
    def test_decode_errors(self, mutate):
        buf = federated.encode(RoundMessage("upload", 1, (np.ones((2, 2)),), "a"))
        with pytest.raises(FormatError):
            federated.decode(mutate(buf))

    def test_invalid_messages(self):
        with pytest.raises(ValueError):
            RoundMessage("gossip", 0, ())
        with pytest.raises(ValueError):
            RoundMessage("upload", 0, ())
        with pytest.raises(ValueError):
            RoundMessage("broadcast", 0, (), "a")


class TestRound:
    def test_single_client_keeps_its_classifier(self):
        clients = make_clients(1)
        server = federated.make_server(clients)
        federated.run_round(server, clients)
        for a, b in zip(server.shared, clients[0].params.shared()):
            assert a.tobytes() == b.tobytes()

    def test_zero_local_epochs_leaves_weights(self):
        clients = make_clients(2)
        server = federated.make_server(clients)
        before = [a.copy() for a in server.shared]
        report = federated.run_round(server, clients, local_epochs=0)
        for a, b in zip(server.shared, before):
            assert a.tobytes() == b.tobytes()
        assert report.round == 1 and server.round == 1

    def test_identical_clients_match_centralized(self):
        # two copies of one client: FedAvg of identical updates equals one local update
        base = make_clients(1)[0]
        twins = [Client(cid, base.covs, base.labels, base.params.copy(), Schedule()) for cid in ("a", "b")]
        solo = Client("a", base.covs, base.labels, base.params.copy(), Schedule())
        server = federated.make_server(twins)
        federated.run_round(server, twins, local_epochs=3)
        solo.local_train(3, None, 2.0, {"a": 0})
        for a, b in zip(server.shared, solo.params.shared()):
            assert a.tobytes() == b.tobytes()

    def test_broadcast_reaches_every_client_bitwise(self):
        clients = make_clients(3)
        server = federated.make_server(clients)
        federated.run_round(server, clients)
        msg = server.broadcast()
        for c in clients:
            c.receive(federated.transmit(msg))
            for a, b in zip(c.params.shared(), server.shared):
                assert a.tobytes() == b.tobytes()

    def test_rejects_non_classifier_upload(self):
        clients = make_clients(2)
        server = federated.make_server(clients)
        leak = RoundMessage("upload", 0, (clients[0].params.bimaps[0].weight,), "c0")
        ok = clients[1].upload(0)
        with pytest.raises(DimensionError):
            server.aggregate([leak, ok])
        assert server.round == 0

    def test_rejects_stale_or_unknown_uploads(self):
        clients = make_clients(2)
        server = federated.make_server(clients)
        with pytest.raises(ValueError):
            server.aggregate([clients[0].upload(5), clients[1].upload(5)])
        with pytest.raises(ValueError):
            server.aggregate([clients[0].upload(0)])

    def test_failure_rolls_back(self, monkeypatch):
        clients = make_clients(2)
        server = federated.make_server(clients)
        federated.run_round(server, clients, weights=LossWeights(0.1))
        before = state_bytes(clients, server)

        def boom(*args, **kwargs):
            raise RuntimeError("client crashed")

        monkeypatch.setattr(clients[1], "local_train", boom)
        with pytest.raises(RoundAborted):
            federated.run_round(server, clients, weights=LossWeights(0.1))
        assert state_bytes(clients, server) == before

    def test_round_counter_and_epochs(self):
        clients = make_clients(2)
        server = federated.make_server(clients)
        for r in range(3):
            report = federated.run_round(server, clients, local_epochs=2)
            assert report.round == r + 1
        assert all(c.epoch == 6 for c in clients)

    def test_domain_messages_exchanged(self):
        clients = make_clients(2, chains=[(8, 4, 2), (8, 2)])
        server = federated.make_server(clients)
        federated.run_round(server, clients, weights=LossWeights(0.1))
        assert set(clients[0].peer_domain) == {"c1"}
        assert all(t.shape[1:] == (2, 2) for t in clients[0].peer_domain["c1"])

    def test_registry_mismatch(self):
        clients = make_clients(2)
        server = Server([a.copy() for a in clients[0].params.shared()], ["c0", "zz"])
        with pytest.raises(ValueError):
            federated.run_round(server, clients)


class TestTraining:
    def test_infinite_stop_single_round(self):
        clients = make_clients(2)
        history = federated.run_federated_training(federated.make_server(clients), clients,
                                                   FederatedConfig(stop_loss=float("inf")))
        assert len(history) == 1

    def test_converges_and_shares_final_classifier(self):
        clients = make_clients(2, chains=[(8, 4, 4), (8, 4)])
        server = federated.make_server(clients)
        history = federated.run_federated_training(
            server, clients, FederatedConfig(max_rounds=300, stop_loss=0.1, weights=LossWeights(0.1)))
        assert all(loss < 0.1 for loss in history[-1].losses.values())
        for c in clients:
            for a, b in zip(c.params.shared(), server.shared):
                assert a.tobytes() == b.tobytes()

    def test_threaded_workers_bitwise_equal(self):
        runs = []
        for workers in (1, 2):
            clients = make_clients(3)
            server = federated.make_server(clients)
            federated.run_federated_training(server, clients, FederatedConfig(
                max_rounds=5, stop_loss=0.0, weights=LossWeights(0.1), workers=workers))
            runs.append(state_bytes(clients, server))
        assert runs[0] == runs[1]
