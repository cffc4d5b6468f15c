"""Binary residual autoencoder side-channel for lossy video streaming.

A base codec produces Y from X; the residual X - Y is squeezed through a
small convolutional autoencoder with a +-1 bottleneck, Huffman-coded and
shipped next to the base stream.  The client adds the decoded residual back.
"""

from .autoencoder import AutoencoderConfig, ResidualAutoencoder, TrainConfig, train
from .binarizer import Binarizer, BinarizerKind, GumbelConfig
from .codec import ExternalCodec, ToyDCTCodec
from .entropy import BinaryMap, EncodedPayload, decode_map, encode_map, pack_bits, unpack_bits
from .errors import BinresError, CodecError, ConfigError, IntegrityError, ShapeError
from .metrics import psnr, ssim
from .pipeline import BitrateReport, StreamContainer, bitrate_account, client_decode, server_encode

__version__ = "0.1.0"
