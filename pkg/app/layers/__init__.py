from app.layers.channel_mixer import ChannelMLP, GddMlp, IdentityMixer, PlainMlpMixer, build_channel_mixer
from app.layers.ssm import (
    MambaBlock,
    SelectiveSSM,
    causal_depthwise_conv,
    discretize,
    lti_convolution_reference,
    selective_scan,
    selective_scan_core,
)
