"""Binary file codecs: frame sequences, model checkpoints, PGM dictionary images."""
