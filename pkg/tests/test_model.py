import numpy as np
import pytest
import torch

from dtml.errors import InvalidDescriptor, MissingCheckpoint, ShapeMismatch
from dtml.model import (Descriptor, build_backbone, forward_dis, forward_seg, load_checkpoint,
                        save_checkpoint)
from gradcheck import check_parameter_gradients

SMALL = Descriptor(levels=2, width=4)


def test_shape_preserved():
    x = torch.randn(1, 1, 32, 32, 32)
    for head in ("seg", "dis"):
        assert build_backbone(SMALL, head, 0)(x).shape == x.shape


def test_default_descriptor_shape_and_ranges():
    x = torch.randn(2, 1, 16, 16, 24) * 5
    s = forward_seg(build_backbone(Descriptor(), "seg", 1), x)
    d = forward_dis(build_backbone(Descriptor(), "dis", 2), x)
    assert s.shape == d.shape == x.shape
    assert torch.all((s > 0) & (s < 1))
    assert torch.all((d > -1) & (d < 1))


def test_same_seed_bitwise_identical():
    a = build_backbone(SMALL, "seg", 7).state_dict()
    b = build_backbone(SMALL, "seg", 7).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = build_backbone(SMALL, "seg", 8).state_dict()
    assert not all(torch.equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize("desc", [dict(levels=1, width=8), dict(levels=3, width=2)])
def test_invalid_descriptor(desc):
    with pytest.raises(InvalidDescriptor):
        build_backbone(desc)


def test_input_not_divisible():
    with pytest.raises(InvalidDescriptor):
        build_backbone(Descriptor(levels=3), input_shape=(20, 20, 20))
    build_backbone(Descriptor(levels=3), input_shape=(24, 24, 24))
    net = build_backbone(Descriptor(levels=3))
    with pytest.raises(ShapeMismatch):
        net(torch.zeros(1, 1, 20, 24, 24))
    with pytest.raises(ShapeMismatch):
        net(torch.zeros(1, 2, 24, 24, 24))


def test_wrong_head():
    with pytest.raises(ValueError):
        forward_dis(build_backbone(SMALL, "seg"), np.zeros((8, 8, 8)))


def test_reproducible_forward():
    x = np.random.default_rng(0).normal(size=(16, 16, 16)).astype(np.float32)
    net = build_backbone(SMALL, "dis", 3)
    assert torch.equal(forward_dis(net, x), forward_dis(net, x))


def test_networks_do_not_share_storage():
    s, d = build_backbone(SMALL, "seg", 1), build_backbone(SMALL, "dis", 2)
    before = {k: v.clone() for k, v in d.state_dict().items()}
    with torch.no_grad():
        for p in s.parameters():
            p.add_(1.0)
    assert all(torch.equal(before[k], v) for k, v in d.state_dict().items())
    ptrs_s = {p.data_ptr() for p in s.parameters()}
    assert ptrs_s.isdisjoint({p.data_ptr() for p in d.parameters()})


@pytest.mark.parametrize("head,fwd", [("seg", forward_seg), ("dis", forward_dis)])
def test_gradient_of_mean_output(head, fwd):
    net = build_backbone(SMALL, head, 5).double()
    x = torch.from_numpy(np.random.default_rng(1).normal(size=(1, 1, 8, 8, 8)))
    errors = check_parameter_gradients(lambda: fwd(net, x).mean(), [net])
    assert max(errors) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    net = build_backbone(SMALL, "dis", 4)
    save_checkpoint(net, tmp_path / "ck", iteration=17)
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta["iteration"] == 17 and meta["head"] == "dis"
    assert meta["descriptor"] == {"levels": 2, "width": 4, "kernel_size": 3}
    assert all(torch.equal(a, b) for a, b in zip(net.state_dict().values(), loaded.state_dict().values()))
    with np.load(tmp_path / "ck.npz") as z:
        assert all(z[n].dtype == np.dtype("<f4") for n in z.files)
        assert [t["name"] for t in meta["tensors"]] == list(z.files)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingCheckpoint):
        load_checkpoint(tmp_path / "nothing")
