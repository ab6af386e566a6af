"""Generate the synthetic legacy fixtures.

Each fixture is a small random-weight model laid out with the parameter
names of the original PyTorch code, saved as a safetensors state dict,
plus a reference batch with the forward outputs computed here in float64.

    python3 generate.py   # writes *.safetensors next to this file
"""

from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import save_file

OUT = Path(__file__).parent
EPSILON = 1e-4


def vgg_like(widths, blocks):
    layers, c = [], 3
    for b, w in enumerate(widths[:blocks]):
        layers += [nn.Conv2d(c, w, 3, padding=1), nn.ReLU()]
        if b < 3:
            layers.append(nn.MaxPool2d(2, 2))
        c = w
    return nn.Sequential(*layers), c


def squared_distances(x, prototypes):
    """Expanded form |x|² − 2x·p + |p|², clamped at zero."""
    ones = torch.ones_like(prototypes)
    x2 = F.conv2d(x**2, ones)
    xp = F.conv2d(x, prototypes)
    p2 = (prototypes**2).sum(dim=(1, 2, 3)).view(-1, 1, 1)
    return F.relu(x2 - 2 * xp + p2)


class VGGFeatures(nn.Module):
    def __init__(self, widths, blocks):
        super().__init__()
        self.features, self.out_channels = vgg_like(widths, blocks)

    def forward(self, x):
        return self.features(x)


class PPNet(nn.Module):
    def __init__(self, widths, blocks, num_classes, per_class, dim):
        super().__init__()
        self.features = VGGFeatures(widths, blocks)
        c = self.features.out_channels
        self.add_on_layers = nn.Sequential(nn.Conv2d(c, dim, 1), nn.ReLU(), nn.Conv2d(dim, dim, 1), nn.Sigmoid())
        p = num_classes * per_class
        self.prototype_vectors = nn.Parameter(torch.rand(p, dim, 1, 1))
        self.ones = nn.Parameter(torch.ones(p, dim, 1, 1), requires_grad=False)
        self.last_layer = nn.Linear(p, num_classes, bias=False)

    def forward(self, x):
        z = self.add_on_layers(self.features(x))
        d2 = squared_distances(z, self.prototype_vectors)
        min_d2 = -F.max_pool2d(-d2, kernel_size=d2.shape[2:]).flatten(1)
        sim = torch.log((min_d2 + 1) / (min_d2 + EPSILON))
        return sim, self.last_layer(sim)


class Leaf(nn.Module):
    def __init__(self, index, num_classes):
        super().__init__()
        self.index = index
        self._dist_params = nn.Parameter(torch.randn(num_classes))

    def forward(self, sim, out_map):
        return F.softmax(self._dist_params, dim=0).expand(sim.shape[0], -1)


class Branch(nn.Module):
    def __init__(self, index, l, r):
        super().__init__()
        self.index = index
        self.l = l
        self.r = r

    def forward(self, sim, out_map):
        ps = sim[:, out_map[self.index]].unsqueeze(1)
        return (1 - ps) * self.l(sim, out_map) + ps * self.r(sim, out_map)


def build_tree(i, d, depth, num_classes):
    """Pre-order numbering: a branch's left subtree starts at i + 1."""
    if d == depth:
        return Leaf(i, num_classes), 1
    left, ls = build_tree(i + 1, d + 1, depth, num_classes)
    right, rs = build_tree(i + 1 + ls, d + 1, depth, num_classes)
    return Branch(i, left, right), 1 + ls + rs


class ProtoTree(nn.Module):
    def __init__(self, widths, blocks, num_classes, depth, dim):
        super().__init__()
        self._net, c = vgg_like(widths, blocks)
        self._add_on = nn.Sequential(nn.Conv2d(c, dim, 1), nn.Sigmoid())
        self.prototype_layer = nn.Module()
        p = 2**depth - 1
        self.prototype_layer.prototype_vectors = nn.Parameter(0.5 + 0.1 * torch.randn(p, dim, 1, 1))
        self._root, _ = build_tree(0, 0, depth, num_classes)
        branches = []

        def collect(n):
            if isinstance(n, Branch):
                branches.append(n.index)
                collect(n.l)
                collect(n.r)

        collect(self._root)
        perm = torch.randperm(p)
        self.register_buffer("_out_map", torch.zeros(max(branches) + 1, dtype=torch.int64))
        for k, b in enumerate(branches):
            self._out_map[b] = perm[k]

    def forward(self, x):
        z = self._add_on(self._net(x))
        d2 = squared_distances(z, self.prototype_layer.prototype_vectors)
        min_d2 = -F.max_pool2d(-d2, kernel_size=d2.shape[2:]).flatten(1)
        sim = torch.exp(-min_d2)
        return sim, self._root(sim, self._out_map)


def save(name, model, batch):
    state = {}
    for k, v in model.state_dict().items():
        state[k] = v.detach().clone().contiguous()
        if state[k].is_floating_point():
            state[k] = state[k].to(torch.float32)
    save_file(state, OUT / f"{name}.safetensors", metadata={"source": name})
    # Reference outputs from the stored float32 weights, computed in float64.
    ref = model.double()
    for k, v in ref.state_dict().items():
        if v.is_floating_point():
            v.copy_(state[k].double())
    with torch.no_grad():
        sim, out = ref(batch.double())
    save_file(
        {
            "input": batch.to(torch.float32).contiguous(),
            "similarity_scores": sim.contiguous(),
            "class_scores": out.contiguous(),
        },
        OUT / f"{name}_reference.safetensors",
    )


def main():
    torch.manual_seed(20240501)
    tiny, full = [4, 8, 8, 8], [16, 32, 64, 128]

    def batch(n=6):
        return torch.randn(n, 3, 32, 32).to(torch.float32)

    ppnet = PPNet(tiny, 4, num_classes=3, per_class=2, dim=6)
    nn.init.normal_(ppnet.last_layer.weight)
    save("protopnet_tiny", ppnet, batch())

    ppnet3 = PPNet(full, 3, num_classes=4, per_class=1, dim=8)
    save("protopnet_builtin_block3", ppnet3, batch())

    tree = ProtoTree(tiny, 4, num_classes=3, depth=3, dim=6)
    save("prototree_tiny_depth3", tree, batch())


if __name__ == "__main__":
    main()
