from omegaconf import OmegaConf

from src.models.captioner import Captioner
from src.objectives import parse_objective


def get_model(args, vocab):
    """Build the captioner described by `args.experiment.captioner` for `vocab`.

    The self-attention mode follows the objective: causal for arc, bidirectional otherwise.
    """
    objective = parse_objective(args.experiment.objective)
    captioner = OmegaConf.to_container(args.experiment.captioner, resolve=True)
    decoder = dict(captioner.get('decoder', {}))
    decoder.update(vocab_size=max(int(decoder.get('vocab_size') or 0), vocab.size),
                   pad_id=vocab.pad_id, mask_id=vocab.mask_id, bos_id=vocab.bos_id,
                   self_attention_mode=objective.attention_mode)
    model = Captioner(encoder=dict(captioner.get('encoder', {})), decoder=decoder,
                      dropout=float(args.experiment.get('dropout', 0.0)), seed=int(args.seed))
    return {'captioner': model}
