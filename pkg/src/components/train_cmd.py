# src/components/train_cmd.py

import logging

from core.trainer import train


def cmd_train(resolved):
    result = train(resolved)
    logging.info(f"Training finished. Log: {result.log_path}; checkpoint: {result.checkpoint}")
    if result.psnr_val is not None:
        logging.info(f"Final validation PSNR {result.psnr_val:.3f} dB, SSIM {result.ssim_val:.4f}")
    return 0
