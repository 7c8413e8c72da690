"""Regenerates wrn_tiny.safetensors and wrn_tiny_reference.safetensors.

A narrow torchvision bottleneck ResNet (one block per stage, width_per_group 8)
with randomized batch-norm statistics, plus its first three stage outputs for
a fixed input. Weights are rounded to float16 to keep the file small.
"""
import torch
from safetensors.torch import save_file
from torchvision.models.resnet import Bottleneck, ResNet

torch.manual_seed(0)
net = ResNet(Bottleneck, [1, 1, 1, 1], width_per_group=8)
with torch.no_grad():
    for m in net.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.weight.uniform_(0.5, 1.5)
            m.bias.uniform_(-0.2, 0.2)
            m.running_mean.uniform_(-0.2, 0.2)
            m.running_var.uniform_(0.5, 2.0)
    for p in net.state_dict().values():
        if p.is_floating_point():
            p.copy_(p.half().float())
net.eval()

weights = {
    k: v.half().contiguous()
    for k, v in net.state_dict().items()
    if not (k.startswith("layer4") or k.startswith("fc") or k.endswith("num_batches_tracked"))
}
save_file(weights, "wrn_tiny.safetensors")

image = torch.rand(1, 3, 32, 32)
mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
with torch.no_grad():
    x = net.maxpool(net.relu(net.bn1(net.conv1((image - mean) / std))))
    l1 = net.layer1(x)
    l2 = net.layer2(l1)
    l3 = net.layer3(l2)
save_file(
    {"image": image, "level1": l1.contiguous(), "level2": l2.contiguous(), "level3": l3.contiguous()},
    "wrn_tiny_reference.safetensors",
)
