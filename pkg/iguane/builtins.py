default = dict(
    # Name(s)
    # -------
    name="none",
    names=(),
    # Command templates
    # -----------------
    # each template receives {input} and {output} (and {mask} / {template} when used)
    skull_strip=None,
    bias_correction=None,
    registration=None,
    # Registration target
    # -------------------
    template=None,  # 1 mm3 template, e.g. MNI152_T1_1mm_brain.nii.gz
    # Behaviour
    # ---------
    pre_stripped=True,  # inputs are already skull-stripped and registered
    keep_intermediate=False,
)


hdbet_n4_flirt = dict(
    default,
    name="hdbet-n4-flirt",
    names=("hd-bet", "hdbet"),
    skull_strip="hd-bet -i {input} -o {output} -device cpu -mode fast -tta 0",
    bias_correction="N4BiasFieldCorrection -d 3 -i {input} -x {mask} -o {output}",
    registration="flirt -in {input} -ref {template} -out {output} -dof 6",
    template="MNI152_T1_1mm_brain.nii.gz",
    pre_stripped=False,
)


fsl_bet = dict(
    default,
    name="bet-flirt",
    names=("fsl",),
    skull_strip="bet {input} {output} -m",
    registration="flirt -in {input} -ref {template} -out {output} -dof 6",
    template="MNI152_T1_1mm_brain.nii.gz",
    pre_stripped=False,
)


built_in_tools = {
    tools["name"]: tools for tools in [default, hdbet_n4_flirt, fsl_bet]
}
