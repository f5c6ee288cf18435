"""speechseek: desk-scale contrastive speech/text segment retrieval.

Speech is aligned to token slots by an integrate-and-fire mechanism,
decoded into token distributions, quantized straight-through onto the
vocabulary, and embedded through the same text encoder that embeds
queries, so retrieval happens entirely in text space.
"""

from .adaptor import QuantizedTokens, map_to_text_space, quantize_st
from .cif import FireResult, WeightPredictor, fire, mae_length_loss, scale_weights
from .config import RunConfig, load_config, parse_config, save_config
from .contrastive import SimilarityMatrix, cosine, nll_symmetric, similarity_matrix, total_loss
from .corpus import (AcousticPrototypeBank, CorpusConfig, LongFormDocument, QAPair,
                     Vocabulary, build_prototype_bank, build_vocabulary, compose_longform,
                     generate_corpus, read_corpus, render_speech, write_corpus)
from .gradcheck import GradCheckError, grad_check
from .model import ModelConfig, SpeechTextRetriever, build_model
from .tensor import Module, Parameter, Tensor, no_grad
from .trainer import Stage, train_stage

__version__ = "0.1.0"
