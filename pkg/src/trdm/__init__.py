"""Two-stage diffusion rainfall nowcasting."""
