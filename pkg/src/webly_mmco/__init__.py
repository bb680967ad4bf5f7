"""Online webly-labeled learning with multimodal co-training."""
from .dataset import (MultimodalDataset, ModalityDescriptor, SynthConfig, load_dataset,
                      make_concat_modality, minibatch_iterator, save_dataset, synth_generate,
                      with_concat)
from .pseudolabel import PseudoLabelMatrix, label_dataset, match_concept
from .training import TrainConfig, train_batch_well, train_mmco, train_online_well
from .selfpaced import AgeSchedule

__version__ = "0.1.0"

__all__ = ["AgeSchedule", "ModalityDescriptor", "MultimodalDataset", "PseudoLabelMatrix", "SynthConfig",
           "TrainConfig", "label_dataset", "load_dataset", "make_concat_modality", "match_concept",
           "minibatch_iterator", "save_dataset", "synth_generate", "train_batch_well", "train_mmco",
           "train_online_well", "with_concat"]
